//! How strongly memorized vs. clean inputs excite different parts of a
//! projection's curvature (or singular) spectrum.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kfac::KfacFactors;
use crate::linalg::{svd, LinalgError, Matrix};
use crate::nn::{self, parse_projection_name, Dataset, ModelCheckpoint, NnError};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("invalid band spec: {0}")]
    Bands(String),
    #[error("empty activation set")]
    Empty,
    #[error("no factors for {0}")]
    MissingFactors(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// Eigenvectors of the activation factor `A`, by eigenvalue descending.
    KfacA,
    /// Right singular vectors of `W`, by singular value descending.
    SvdRight,
}

impl Basis {
    pub fn as_str(self) -> &'static str {
        match self {
            Basis::KfacA => "kfac_a",
            Basis::SvdRight => "svd_right",
        }
    }
}

/// Percentile bands `(lo, hi]` over the ordered basis vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub bases: Vec<Basis>,
    pub bands: Vec<(f64, f64)>,
}

impl Default for BandSpec {
    fn default() -> Self {
        Self { bases: vec![Basis::KfacA, Basis::SvdRight], bands: vec![(0.0, 10.0), (10.0, 25.0), (25.0, 50.0), (50.0, 100.0)] }
    }
}

impl BandSpec {
    /// Bands must be ordered, contiguous and cover `(0, 100]`.
    pub fn validate(&self) -> Result<(), SpectralError> {
        if self.bases.is_empty() {
            return Err(SpectralError::Bands("no bases".into()));
        }
        let mut edge = 0.0;
        for &(lo, hi) in &self.bands {
            if lo != edge || hi <= lo {
                return Err(SpectralError::Bands(format!("band ({lo}, {hi}] does not continue from {edge}")));
            }
            edge = hi;
        }
        if edge != 100.0 {
            return Err(SpectralError::Bands(format!("bands end at {edge}, not 100")));
        }
        Ok(())
    }
}

/// Index range of the vectors whose rank percentile `100·(k+1)/n` lies in `(lo, hi]`.
pub fn band_range(n: usize, lo: f64, hi: f64) -> std::ops::Range<usize> {
    let count = |p: f64| ((p * n as f64 / 100.0) + 1e-9).floor() as usize;
    count(lo).min(n)..count(hi).min(n)
}

/// Mean over rows of `‖Vᵀ_band a‖₂`, where the band's vectors are columns
/// `range` of `basis`.
pub fn band_projection_magnitude(acts: &Matrix, basis: &Matrix, range: std::ops::Range<usize>) -> Result<f64, SpectralError> {
    if acts.rows() == 0 {
        return Err(SpectralError::Empty);
    }
    if range.is_empty() || range.end > basis.cols() {
        return Err(SpectralError::Bands(format!("band {range:?} is empty or exceeds {} vectors", basis.cols())));
    }
    if acts.cols() != basis.rows() {
        return Err(SpectralError::Shape(format!("activations of width {} for a basis in dimension {}", acts.cols(), basis.rows())));
    }
    let coef = acts.matmul(&basis.slice_cols(range.start, range.end))?;
    let total: f64 = (0..coef.rows()).map(|r| coef.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
    Ok(total / acts.rows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub layer: String,
    pub basis: Basis,
    pub band_lo: f64,
    pub band_hi: f64,
    pub mem_mag: f64,
    pub clean_mag: f64,
    pub ratio: f64,
}

/// Inputs of every named projection over all loss positions of `data`.
pub fn projection_activations(model: &ModelCheckpoint, data: &Dataset, layers: &[String]) -> Result<BTreeMap<String, Matrix>, SpectralError> {
    let mut parts: BTreeMap<String, Vec<Matrix>> = BTreeMap::new();
    let parsed: Vec<(String, usize, nn::Projection)> = layers
        .iter()
        .map(|l| parse_projection_name(l).map(|(i, p)| (l.clone(), i, p)).ok_or_else(|| NnError::MissingTensor(l.clone())))
        .collect::<Result<_, _>>()?;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(32) {
        let fwd = data.with_batch(chunk, |b| nn::forward(model, b))?;
        for (name, layer, proj) in &parsed {
            parts.entry(name.clone()).or_default().push(fwd.projection_inputs(*layer, *proj)?);
        }
    }
    parts
        .into_iter()
        .map(|(k, v)| {
            let refs: Vec<&Matrix> = v.iter().collect();
            Ok((k, Matrix::vstack(&refs)?))
        })
        .collect()
}

/// One row per (layer, basis, band) comparing memorized and clean inputs.
pub fn activation_ratio_report(
    model: &ModelCheckpoint,
    factors: &BTreeMap<String, KfacFactors>,
    layers: &[String],
    mem_set: &Dataset,
    clean_set: &Dataset,
    spec: &BandSpec,
) -> Result<Vec<BandRow>, SpectralError> {
    spec.validate()?;
    if mem_set.is_empty() || clean_set.is_empty() {
        return Err(SpectralError::Empty);
    }
    for l in layers {
        if spec.bases.contains(&Basis::KfacA) && !factors.contains_key(l) {
            return Err(SpectralError::MissingFactors(l.clone()));
        }
    }
    let mem = projection_activations(model, mem_set, layers)?;
    let clean = projection_activations(model, clean_set, layers)?;
    let mut rows = Vec::new();
    for l in layers {
        for &basis in &spec.bases {
            let vectors = match basis {
                Basis::KfacA => factors[l].eig_a.eigenvectors.clone(),
                Basis::SvdRight => svd(model.get(l)?)?.vt.transpose(),
            };
            for &(lo, hi) in &spec.bands {
                let range = band_range(vectors.cols(), lo, hi);
                let mem_mag = band_projection_magnitude(&mem[l], &vectors, range.clone())?;
                let clean_mag = band_projection_magnitude(&clean[l], &vectors, range)?;
                let ratio = if clean_mag > 0.0 { mem_mag / clean_mag } else { f64::NAN };
                rows.push(BandRow { layer: l.clone(), basis, band_lo: lo, band_hi: hi, mem_mag, clean_mag, ratio });
            }
        }
    }
    Ok(rows)
}

/// CSV with header `layer,basis,band_lo,band_hi,mem_mag,clean_mag,ratio`.
pub fn band_rows_csv(rows: &[BandRow]) -> String {
    let mut s = String::from("layer,basis,band_lo,band_hi,mem_mag,clean_mag,ratio\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{:.9},{:.9},{:.9}", r.layer, r.basis.as_str(), r.band_lo, r.band_hi, r.mem_mag, r.clean_mag, r.ratio)
            .expect("writing to a String");
    }
    s
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::kfac::{collect_factors, CollectConfig};
    use crate::nn::{ArchSpec, LmArch};
    use crate::rng::rng_from_seed;

    #[test]
    fn default_bands_are_valid_and_cover_all_vectors() {
        let spec = BandSpec::default();
        spec.validate().unwrap();
        let ranges: Vec<_> = spec.bands.iter().map(|&(lo, hi)| band_range(64, lo, hi)).collect();
        assert_eq!(ranges, vec![0..6, 6..16, 16..32, 32..64]);
        assert_eq!(band_range(128, 0.0, 10.0), 0..12);
        let gap = BandSpec { bands: vec![(0.0, 10.0), (20.0, 100.0)], ..BandSpec::default() };
        assert!(gap.validate().is_err());
        let short = BandSpec { bands: vec![(0.0, 50.0)], ..BandSpec::default() };
        assert!(short.validate().is_err());
    }

    #[test]
    fn aligned_activation_lands_in_the_top_band() {
        let basis = Matrix::identity(20);
        let mut acts = Matrix::zeros(1, 20);
        acts.as_mut_slice()[0] = 3.0;
        assert_eq!(band_projection_magnitude(&acts, &basis, band_range(20, 0.0, 10.0)).unwrap(), 3.0);
        for (lo, hi) in [(10.0, 25.0), (25.0, 50.0), (50.0, 100.0)] {
            assert_eq!(band_projection_magnitude(&acts, &basis, band_range(20, lo, hi)).unwrap(), 0.0);
        }
        assert!(matches!(band_projection_magnitude(&Matrix::zeros(0, 20), &basis, 0..2), Err(SpectralError::Empty)));
        assert!(band_projection_magnitude(&acts, &basis, 3..3).is_err());
    }

    #[test]
    fn band_magnitudes_satisfy_parseval() {
        let mut r = rng_from_seed(4);
        let s = Matrix::from_fn(16, 16, |_, _| StandardNormal.sample(&mut r));
        let basis = crate::linalg::sym_eig(&s.add(&s.transpose()).unwrap()).unwrap().eigenvectors;
        let spec = BandSpec::default();
        for _ in 0..10 {
            let a = Matrix::from_fn(1, 16, |_, _| StandardNormal.sample(&mut r));
            let total: f64 = spec
                .bands
                .iter()
                .map(|&(lo, hi)| band_projection_magnitude(&a, &basis, band_range(16, lo, hi)).unwrap().powi(2))
                .sum();
            let norm2: f64 = a.as_slice().iter().map(|v| v * v).sum();
            assert!((total - norm2).abs() <= 1e-10 * norm2.max(1.0));
        }
    }

    #[test]
    fn isotropic_inputs_excite_all_bands_equally() {
        // Per-vector mean |coefficient| is E|z| = sqrt(2/π) for every band.
        let n = 10_000;
        let d = 20;
        let mut r = rng_from_seed(5);
        let acts = Matrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut r));
        let expected = (2.0 / std::f64::consts::PI).sqrt();
        let sd_one = (1.0 - 2.0 / std::f64::consts::PI).sqrt();
        for (lo, hi) in BandSpec::default().bands {
            let range = band_range(d, lo, hi);
            let m = range.len();
            let mean_abs: f64 = (0..n).map(|i| acts.row(i)[range.clone()].iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>() / (n * m) as f64;
            let bound = 3.0 * sd_one / ((n * m) as f64).sqrt();
            assert!((mean_abs - expected).abs() <= bound, "band ({lo},{hi}]: {mean_abs}");
            // the band norm, divided by sqrt(band size), concentrates near 1
            let mag = band_projection_magnitude(&acts, &Matrix::identity(d), range).unwrap() / (m as f64).sqrt();
            assert!((mag - 1.0).abs() < 0.1 + 1.0 / m as f64, "band ({lo},{hi}]: {mag}");
        }
    }

    #[test]
    fn identical_sets_give_unit_ratios() {
        let arch = ArchSpec::Lm(LmArch { vocab: 11, context: 12, n_layers: 2, d_model: 20, n_heads: 2, d_mlp: 40 });
        let model = ModelCheckpoint::init(arch, 3).unwrap();
        let mut r = rng_from_seed(6);
        let seqs: Vec<Vec<u32>> = (0..8).map(|_| (0..10).map(|_| rand::Rng::random_range(&mut r, 0..11)).collect()).collect();
        let data = Dataset::Lm(seqs);
        let layers = vec!["layer1.up".to_string(), "layer0.down".to_string()];
        let factors = collect_factors(&model, &data, &layers, &CollectConfig::default()).unwrap();
        let rows = activation_ratio_report(&model, &factors, &layers, &data, &data, &BandSpec::default()).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 4);
        assert!(rows.iter().all(|r| r.ratio == 1.0));
        let csv = band_rows_csv(&rows);
        assert!(csv.starts_with("layer,basis,band_lo,band_hi,mem_mag,clean_mag,ratio\nlayer1.up,kfac_a,0,10,"));
        assert!(matches!(
            activation_ratio_report(&model, &BTreeMap::new(), &layers, &data, &data, &BandSpec::default()),
            Err(SpectralError::MissingFactors(_))
        ));
    }
}
