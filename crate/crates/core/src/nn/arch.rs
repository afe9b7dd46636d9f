use std::fmt;

use serde::{Deserialize, Serialize};

use super::NnError;

/// Architecture descriptor stored in every checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    Classifier(ClassifierArch),
    Lm(LmArch),
}

/// Residual MLP classifier: `embed → n_blocks × (x + down(silu(up(norm x)))) → head`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub input_dim: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub d_mlp: usize,
    pub n_classes: usize,
}

/// Pre-norm decoder-only transformer with a gated SiLU MLP in every block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmArch {
    pub vocab: usize,
    pub context: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
}

impl Default for LmArch {
    fn default() -> Self {
        Self { vocab: 64, context: 96, n_layers: 4, d_model: 64, n_heads: 4, d_mlp: 128 }
    }
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self { input_dim: 64, d_model: 64, n_blocks: 2, d_mlp: 128, n_classes: 10 }
    }
}

/// The MLP projections that can be instrumented and edited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Gate,
    Up,
    Down,
}

impl Projection {
    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Gate => "gate",
            Projection::Up => "up",
            Projection::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gate" => Some(Projection::Gate),
            "up" => Some(Projection::Up),
            "down" => Some(Projection::Down),
            _ => None,
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Name of a projection tensor, `layer{i}.{gate|up|down}`.
pub fn projection_name(layer: usize, proj: Projection) -> String {
    format!("layer{layer}.{proj}")
}

/// Inverse of [`projection_name`].
pub fn parse_projection_name(name: &str) -> Option<(usize, Projection)> {
    let rest = name.strip_prefix("layer")?;
    let (idx, proj) = rest.split_once('.')?;
    Some((idx.parse().ok()?, Projection::parse(proj)?))
}

impl ArchSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: &str| Err(NnError::InvalidArch(msg.to_string()));
        match self {
            ArchSpec::Lm(a) => {
                if [a.vocab, a.n_layers, a.d_model, a.n_heads, a.d_mlp].contains(&0) {
                    return bad("all dimensions must be at least 1");
                }
                if a.context < 2 {
                    return bad("context length must be at least 2");
                }
                if a.d_model % a.n_heads != 0 {
                    return bad("d_model must be divisible by n_heads");
                }
            }
            ArchSpec::Classifier(a) => {
                if [a.input_dim, a.d_model, a.n_blocks, a.d_mlp].contains(&0) {
                    return bad("all dimensions must be at least 1");
                }
                if a.n_classes < 2 {
                    return bad("a classifier needs at least 2 classes");
                }
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        match self {
            ArchSpec::Lm(a) => a.n_layers,
            ArchSpec::Classifier(a) => a.n_blocks,
        }
    }

    /// Projections present in every block, in a fixed order.
    pub fn projections(&self) -> &'static [Projection] {
        match self {
            ArchSpec::Lm(_) => &[Projection::Gate, Projection::Up, Projection::Down],
            ArchSpec::Classifier(_) => &[Projection::Up, Projection::Down],
        }
    }

    /// Every instrumented projection name, layer-major.
    pub fn projection_names(&self) -> Vec<String> {
        (0..self.n_layers())
            .flat_map(|l| self.projections().iter().map(move |&p| projection_name(l, p)))
            .collect()
    }

    /// Number of output classes (vocabulary size for the LM).
    pub fn n_outputs(&self) -> usize {
        match self {
            ArchSpec::Lm(a) => a.vocab,
            ArchSpec::Classifier(a) => a.n_classes,
        }
    }

    /// Ordered `(name, rows, cols)` manifest of every parameter tensor.
    pub fn tensor_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        match self {
            ArchSpec::Lm(a) => {
                let (d, m) = (a.d_model, a.d_mlp);
                out.push(("tok_emb".into(), a.vocab, d));
                out.push(("pos_emb".into(), a.context, d));
                for l in 0..a.n_layers {
                    out.push((format!("layer{l}.attn_norm"), 1, d));
                    for w in ["q", "k", "v", "o"] {
                        out.push((format!("layer{l}.{w}"), d, d));
                    }
                    out.push((format!("layer{l}.mlp_norm"), 1, d));
                    out.push((projection_name(l, Projection::Gate), m, d));
                    out.push((projection_name(l, Projection::Up), m, d));
                    out.push((projection_name(l, Projection::Down), d, m));
                }
                out.push(("final_norm".into(), 1, d));
                out.push(("lm_head".into(), a.vocab, d));
            }
            ArchSpec::Classifier(a) => {
                let (d, m) = (a.d_model, a.d_mlp);
                out.push(("embed".into(), d, a.input_dim));
                for l in 0..a.n_blocks {
                    out.push((format!("layer{l}.norm"), 1, d));
                    out.push((projection_name(l, Projection::Up), m, d));
                    out.push((projection_name(l, Projection::Down), d, m));
                }
                out.push(("final_norm".into(), 1, d));
                out.push(("head".into(), a.n_classes, d));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, r, c)| r * c).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rules() {
        assert!(ArchSpec::Lm(LmArch::default()).validate().is_ok());
        let odd_heads = LmArch { n_heads: 3, ..LmArch::default() };
        assert!(ArchSpec::Lm(odd_heads).validate().is_err());
        let short = LmArch { context: 1, ..LmArch::default() };
        assert!(ArchSpec::Lm(short).validate().is_err());
        let one_class = ClassifierArch { n_classes: 1, ..ClassifierArch::default() };
        assert!(ArchSpec::Classifier(one_class).validate().is_err());
    }

    #[test]
    fn projection_names_round_trip() {
        let arch = ArchSpec::Lm(LmArch { n_layers: 2, ..LmArch::default() });
        let names = arch.projection_names();
        assert_eq!(names[0], "layer0.gate");
        assert_eq!(names.len(), 6);
        for n in names {
            let (l, p) = parse_projection_name(&n).unwrap();
            assert_eq!(projection_name(l, p), n);
        }
        assert_eq!(parse_projection_name("layer1.q"), None);
    }
}
