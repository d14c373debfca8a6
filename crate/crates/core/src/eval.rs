//! Metrics: RMSE, PR-AUC, probabilistic attributions, attribution PRF and J-divergence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

use crate::elbo::marginal_stats;
use crate::error::{Error, Result};
use crate::menn::PsiModel;
use crate::nncore::Matrix;
use crate::shapley::{shapley_kernel_weight, FeatureSubset};

/// Additive smoothing applied to every histogram bin.
pub const HIST_EPS: f64 = 1e-10;

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::shape("rmse", predictions.len(), targets.len()));
    }
    if predictions.is_empty() {
        return Err(Error::Domain("rmse of empty input".into()));
    }
    let sse: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok((sse / predictions.len() as f64).sqrt())
}

/// Average precision over descending score thresholds; tied scores form one threshold.
pub fn pr_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("pr_auc", scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(Error::Domain("pr_auc of empty input".into()));
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Domain("pr_auc labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("pr_auc scores".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1.0).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Domain("pr_auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut last_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(labels[order[i]] == 1.0);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - last_recall) * precision;
        last_recall = recall;
    }
    Ok(ap)
}

/// `μ(x) = φ0 + Σ_d f_d(x)` with all features present.
pub fn predict_mean(model: &PsiModel, x: &Matrix) -> Result<Vec<f64>> {
    let f = model.predict_f(x, &Matrix::filled(x.rows(), x.cols(), 1.0))?;
    let phi0 = model.phi0();
    Ok((0..x.rows()).map(|i| phi0 + f.row(i).iter().sum::<f64>()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAttribution {
    pub f: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `att[k][d] = f_d + z_k σ_d`.
    pub att: Vec<Vec<f64>>,
    /// Per-instance min-max normalization of `att[k]`.
    pub att_std: Vec<Vec<f64>>,
    /// `rank[k][d]`: 1 for the largest attribution.
    pub rank: Vec<Vec<usize>>,
    /// `degenerate[k]` when all `att[k][d]` coincide (then `att_std[k]` is all zeros).
    pub degenerate: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub z_list: Vec<f64>,
    pub instances: Vec<InstanceAttribution>,
}

impl AttributionReport {
    pub fn z_index(&self, z: f64) -> Result<usize> {
        self.z_list
            .iter()
            .position(|&v| v == z)
            .ok_or_else(|| Error::Config(format!("z = {z} not in the report")))
    }

    /// `n × D` matrix of standardized attributions for `z`.
    pub fn standardized(&self, z: f64) -> Result<Matrix> {
        let k = self.z_index(z)?;
        let d = self.instances.first().map_or(0, |i| i.f.len());
        Ok(Matrix::from_fn(self.instances.len(), d, |i, j| {
            self.instances[i].att_std[k][j]
        }))
    }
}

/// Ranks (1 = largest, ties by feature index) of a score vector.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut rank = vec![0; values.len()];
    for (r, &d) in order.iter().enumerate() {
        rank[d] = r + 1;
    }
    rank
}

/// Min-max normalization; `None` when the range is zero.
pub fn min_max(values: &[f64]) -> Option<Vec<f64>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (hi > lo).then(|| values.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

pub fn attribution_from(f: Vec<f64>, sigma: Vec<f64>, z_list: &[f64]) -> InstanceAttribution {
    let mut inst = InstanceAttribution {
        f,
        sigma,
        att: Vec::new(),
        att_std: Vec::new(),
        rank: Vec::new(),
        degenerate: Vec::new(),
    };
    for &z in z_list {
        let att: Vec<f64> = inst.f.iter().zip(&inst.sigma).map(|(f, s)| f + z * s).collect();
        let (std, degenerate) = match min_max(&att) {
            Some(v) => (v, false),
            None => (vec![0.0; att.len()], true),
        };
        inst.rank.push(rank_descending(&att));
        inst.att.push(att);
        inst.att_std.push(std);
        inst.degenerate.push(degenerate);
    }
    inst
}

/// Probabilistic attributions `f_d + zσ_d` for every row of `x` with all features present.
pub fn attribute(model: &PsiModel, x: &Matrix, z_list: &[f64]) -> Result<AttributionReport> {
    if z_list.is_empty() {
        return Err(Error::Config("z list is empty".into()));
    }
    if z_list.iter().any(|z| !z.is_finite()) {
        return Err(Error::Config("z values must be finite".into()));
    }
    let pred = model.predict_full(x)?;
    let instances = (0..x.rows())
        .map(|i| attribution_from(pred.f.row(i).to_vec(), pred.sigma.row(i).to_vec(), z_list))
        .collect();
    Ok(AttributionReport {
        z_list: z_list.to_vec(),
        instances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Precision, recall and F of standardized attributions against binary ground-truth masks.
pub fn attribution_prf_scores(scores: &Matrix, masks: &Matrix) -> Result<Prf> {
    if scores.shape() != masks.shape() {
        return Err(Error::shape(
            "attribution_prf",
            format!("{:?}", masks.shape()),
            format!("{:?}", scores.shape()),
        ));
    }
    if masks.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Domain("ground-truth masks must be binary".into()));
    }
    let (mut tp, mut fna, mut n_pos) = (0.0, 0.0, 0usize);
    let (mut fp, mut n_neg) = (0.0, 0usize);
    for i in 0..scores.rows() {
        let (s, m) = (scores.row(i), masks.row(i));
        let pos: Vec<f64> = s.iter().zip(m).filter(|(_, &m)| m == 1.0).map(|(s, _)| *s).collect();
        let neg: Vec<f64> = s.iter().zip(m).filter(|(_, &m)| m == 0.0).map(|(s, _)| *s).collect();
        if !pos.is_empty() {
            tp += pos.iter().sum::<f64>() / pos.len() as f64;
            fna += pos.iter().map(|v| 1.0 - v).sum::<f64>() / pos.len() as f64;
            n_pos += 1;
        }
        if !neg.is_empty() {
            fp += neg.iter().sum::<f64>() / neg.len() as f64;
            n_neg += 1;
        }
    }
    let tp = if n_pos > 0 { tp / n_pos as f64 } else { 0.0 };
    let fna = if n_pos > 0 { fna / n_pos as f64 } else { 0.0 };
    let fp = if n_neg > 0 { fp / n_neg as f64 } else { 0.0 };
    let ratio = |a: f64, b: f64| if a + b > 0.0 { a / (a + b) } else { 0.0 };
    let precision = ratio(tp, fp);
    let recall = ratio(tp, fna);
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Prf {
        precision,
        recall,
        f,
    })
}

pub fn attribution_prf(report: &AttributionReport, masks: &Matrix, z: f64) -> Result<Prf> {
    attribution_prf_scores(&report.standardized(z)?, masks)
}

/// Symmetrized histogram KL `½(KL(q‖p) + KL(p‖q))` between two sample sets
/// (rows are samples); every dimension uses `bins` bins over the joint range.
pub fn j_divergence(a: &Matrix, b: &Matrix, bins: usize) -> Result<f64> {
    if a.cols() != b.cols() || a.cols() == 0 {
        return Err(Error::shape("j_divergence", a.cols(), b.cols()));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Domain("j_divergence of an empty sample".into()));
    }
    if bins < 2 {
        return Err(Error::Config(format!("bin count must be at least 2, got {bins}")));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Numeric("j_divergence samples".into()));
    }
    let dims = a.cols();
    let ranges: Vec<(f64, f64)> = (0..dims)
        .map(|j| {
            let col = a.column(j).into_iter().chain(b.column(j));
            col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        })
        .collect();
    let key = |row: &[f64]| -> Vec<u32> {
        row.iter()
            .zip(&ranges)
            .map(|(&v, &(lo, hi))| {
                if hi > lo {
                    (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1) as u32
                } else {
                    0
                }
            })
            .collect()
    };
    let mut counts: BTreeMap<Vec<u32>, (f64, f64)> = BTreeMap::new();
    for i in 0..a.rows() {
        counts.entry(key(a.row(i))).or_default().0 += 1.0;
    }
    for i in 0..b.rows() {
        counts.entry(key(b.row(i))).or_default().1 += 1.0;
    }
    let total_bins = (bins as f64).powi(dims as i32);
    let za = a.rows() as f64 + HIST_EPS * total_bins;
    let zb = b.rows() as f64 + HIST_EPS * total_bins;
    let (mut kl_ab, mut kl_ba) = (0.0, 0.0);
    for &(ca, cb) in counts.values() {
        let p = (ca + HIST_EPS) / za;
        let q = (cb + HIST_EPS) / zb;
        kl_ab += p * (p / q).ln();
        kl_ba += q * (q / p).ln();
    }
    let empty = total_bins - counts.len() as f64;
    if empty > 0.0 {
        let (p, q) = (HIST_EPS / za, HIST_EPS / zb);
        kl_ab += empty * p * (p / q).ln();
        kl_ba += empty * q * (q / p).ln();
    }
    Ok((0.5 * (kl_ab + kl_ba)).max(0.0))
}

/// Mean [`j_divergence`] over several bin counts.
pub fn j_divergence_multi(a: &Matrix, b: &Matrix, bin_counts: &[usize]) -> Result<f64> {
    if bin_counts.is_empty() {
        return Err(Error::Config("no bin counts".into()));
    }
    let mut total = 0.0;
    for &bins in bin_counts {
        total += j_divergence(a, b, bins)?;
    }
    Ok(total / bin_counts.len() as f64)
}

/// Largest feature count accepted by the coalition-weighted protocol.
pub const MAX_J_FEATURES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JDivergenceConfig {
    pub n_bin_draws: usize,
    pub bin_min: usize,
    pub bin_max: usize,
    /// Rows drawn per coalition for both the empirical and the model sample.
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for JDivergenceConfig {
    fn default() -> Self {
        JDivergenceConfig {
            n_bin_draws: 20,
            bin_min: 10,
            bin_max: 200,
            sample_size: 4096,
            seed: 0,
        }
    }
}

impl JDivergenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bin_draws == 0 || self.sample_size == 0 {
            return Err(Error::Config("bin draws and sample size must be positive".into()));
        }
        if self.bin_min < 2 || self.bin_max < self.bin_min {
            return Err(Error::Config(format!(
                "bin range {}..={} must satisfy 2 ≤ min ≤ max",
                self.bin_min, self.bin_max
            )));
        }
        Ok(())
    }

    pub fn draw_bin_counts<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        (0..self.n_bin_draws)
            .map(|_| rng.random_range(self.bin_min..=self.bin_max))
            .collect()
    }
}

/// Kernel-weighted J-divergence between `[y, x_s]` rows of the data and
/// `[ŷ, x_s]` rows with `ŷ ~ N(μ(x_s), σ²(x_s))`, averaged over pivots `j`
/// and coalitions `s ⊆ [D]∖{j}` with weight `p(s)/D`.
pub fn j_divergence_protocol(model: &PsiModel, x: &Matrix, y: &[f64], config: &JDivergenceConfig) -> Result<f64> {
    config.validate()?;
    let d = model.n_features();
    if d > MAX_J_FEATURES {
        return Err(Error::Capacity(format!(
            "J-divergence protocol supports at most {MAX_J_FEATURES} features, got {d}"
        )));
    }
    if x.cols() != d || x.rows() != y.len() {
        return Err(Error::shape("j_divergence_protocol", format!("N×{d} and N targets"), format!("{:?}/{}", x.shape(), y.len())));
    }
    if x.rows() == 0 {
        return Err(Error::Domain("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bin_counts = config.draw_bin_counts(&mut rng);
    let m = config.sample_size;
    let phi0 = model.phi0();
    let sigma0 = model.sigma0();

    // Model samples depend only on the coalition, so each coalition is evaluated once.
    let mut cache: HashMap<u64, f64> = HashMap::new();
    let mut total = 0.0;
    for j in 0..d {
        for bits in 0..1u64 << d {
            let s = FeatureSubset::from_bits(bits);
            if s.contains(j) {
                continue;
            }
            let weight = shapley_kernel_weight(s.len(), d)? / d as f64;
            let value = match cache.get(&bits) {
                Some(&v) => v,
                None => {
                    let members: Vec<usize> = s.iter().collect();
                    let rows: Vec<usize> = (0..m).map(|_| rng.random_range(0..x.rows())).collect();
                    let xs = x.select_rows(&rows);
                    let mask = Matrix::from_fn(m, d, |_, c| f64::from(u8::from(s.contains(c))));
                    let pred = model.predict(&xs, &mask)?;
                    let cols = 1 + members.len();
                    let mut emp = Matrix::zeros(m, cols);
                    let mut gen = Matrix::zeros(m, cols);
                    for (i, &r) in rows.iter().enumerate() {
                        let st = marginal_stats(pred.f.row(i), pred.sigma.row(i), phi0, sigma0);
                        let z: f64 = rng.sample(StandardNormal);
                        emp.set(i, 0, y[r]);
                        gen.set(i, 0, st.mu + st.var.sqrt() * z);
                        for (k, &c) in members.iter().enumerate() {
                            emp.set(i, k + 1, xs.get(i, c));
                            gen.set(i, k + 1, xs.get(i, c));
                        }
                    }
                    let v = j_divergence_multi(&emp, &gen, &bin_counts)?;
                    cache.insert(bits, v);
                    v
                }
            };
            total += weight * value;
        }
    }
    Ok(total)
}
