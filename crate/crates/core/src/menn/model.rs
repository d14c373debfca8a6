use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::{build_mask_stack, build_mask_stack_for_inputs, BandRounding, MaskSpec, MaskStack};
use crate::elbo::special::{sigmoid, softplus};
use crate::error::{Error, Result};
use crate::nncore::{Activation, DenseLayer, Graph, Matrix, ParamId, ParamStore, Sequential, Var};
use crate::shapley::FeatureSubset;

/// Lower bound added to every softplus scale.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Per-instance feature indicator: `true` keeps the feature, `false` removes it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RemovalMask {
    present: Vec<bool>,
}

impl RemovalMask {
    pub fn full(n: usize) -> Self {
        RemovalMask {
            present: vec![true; n],
        }
    }

    pub fn empty(n: usize) -> Self {
        RemovalMask {
            present: vec![false; n],
        }
    }

    pub fn from_bools(present: Vec<bool>) -> Self {
        RemovalMask { present }
    }

    pub fn from_subset(subset: FeatureSubset, n: usize) -> Self {
        RemovalMask {
            present: (0..n).map(|d| subset.contains(d)).collect(),
        }
    }

    pub fn to_subset(&self) -> FeatureSubset {
        FeatureSubset::from_indices(
            self.present
                .iter()
                .enumerate()
                .filter(|(_, &p)| p)
                .map(|(d, _)| d),
        )
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn is_present(&self, d: usize) -> bool {
        self.present[d]
    }

    pub fn count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.present
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.present.iter().map(|&p| f64::from(u8::from(p))).collect()
    }
}

/// Stacks masks into an `n × D` matrix of 0/1 values.
pub fn masks_to_matrix(masks: &[RemovalMask], n_features: usize) -> Matrix {
    let mut m = Matrix::zeros(masks.len(), n_features);
    for (i, r) in masks.iter().enumerate() {
        assert_eq!(r.len(), n_features, "removal mask length");
        for d in 0..n_features {
            if r.is_present(d) {
                m.set(i, d, 1.0);
            }
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Menn,
    FfnnBaseline,
}

/// What the σ-head of the masked network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaInput {
    /// Every `σ_d` from the flattened `Z′` and the full `o`.
    #[default]
    Full,
    /// `σ_d` from `(z′_d, o_d)` only, through a masked head.
    PerFeature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_features: usize,
    pub architecture: Architecture,
    pub activation: Activation,
    /// Hidden widths of the embedding network.
    pub menn_hidden: Vec<usize>,
    /// Embedding width per feature.
    pub embed_width: usize,
    /// Hidden widths of the f-head (for the baseline: of the whole trunk, after `menn_hidden`).
    pub head_hidden: Vec<usize>,
    pub menn2_hidden: Vec<usize>,
    pub menn2_embed: usize,
    pub sigma_hidden: Vec<usize>,
    pub sigma_input: SigmaInput,
    pub band_rounding: BandRounding,
    /// Fill value for removed inputs of the feed-forward baseline.
    pub out_of_support: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(n_features: usize) -> Self {
        let d = n_features.max(1);
        ModelConfig {
            n_features,
            architecture: Architecture::Menn,
            activation: Activation::Elu,
            menn_hidden: vec![32 * d, 32 * d],
            embed_width: 16,
            head_hidden: vec![128, 128],
            menn2_hidden: vec![8 * d],
            menn2_embed: 8,
            sigma_hidden: vec![32 * d],
            sigma_input: SigmaInput::Full,
            band_rounding: BandRounding::default(),
            out_of_support: -5.0,
            init_seed: 0,
        }
    }

    pub fn with_architecture(mut self, arch: Architecture) -> Self {
        self.architecture = arch;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.n_features > FeatureSubset::MAX_FEATURES {
            return Err(Error::Config(format!(
                "feature count must be in 1..={}, got {}",
                FeatureSubset::MAX_FEATURES,
                self.n_features
            )));
        }
        if self.embed_width == 0 || self.menn2_embed == 0 {
            return Err(Error::Config("embedding widths must be positive".into()));
        }
        if !self.out_of_support.is_finite() {
            return Err(Error::Config("out-of-support constant must be finite".into()));
        }
        let all = self
            .menn_hidden
            .iter()
            .chain(&self.head_hidden)
            .chain(&self.menn2_hidden)
            .chain(&self.sigma_hidden);
        if all.clone().any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn menn1_spec(&self) -> MaskSpec {
        MaskSpec::new(self.n_features, self.menn_hidden.clone(), self.embed_width)
    }

    pub fn menn2_spec(&self) -> MaskSpec {
        MaskSpec::new(self.n_features, self.menn2_hidden.clone(), self.menn2_embed)
    }

    pub fn sigma_spec(&self) -> MaskSpec {
        MaskSpec::new(self.n_features, self.sigma_hidden.clone(), 1)
    }
}

#[derive(Debug, Clone)]
enum Net {
    Menn {
        menn1: Sequential,
        stack1: MaskStack,
        baseline: ParamId,
        reducer: DenseLayer,
        f_head: Sequential,
        menn2: Sequential,
        sigma_head: Sequential,
    },
    Ffnn {
        trunk: Sequential,
        sigma_head: Sequential,
    },
}

/// Graph handles produced by [`PsiModel::forward_graph`].
#[derive(Debug, Clone)]
pub struct GraphForward {
    /// `rows × D` per-feature outputs under the main masks.
    pub f: Var,
    /// `rows × D` attribution scales under the main masks.
    pub sigma: Var,
    /// One `rows × D` output per extra mask set (f-path only).
    pub f_extra: Vec<Var>,
    pub phi0: Var,
    pub sigma0: Var,
}

/// Per-feature outputs and scales for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub f: Matrix,
    pub sigma: Matrix,
}

/// The trained artifact: f-network, σ-network, bias `φ0` and global scale `σ0`.
#[derive(Debug, Clone)]
pub struct PsiModel {
    config: ModelConfig,
    store: ParamStore,
    net: Net,
    phi0: ParamId,
    log_sigma0: ParamId,
}

fn expand_mask(r: &Matrix, width: usize) -> Matrix {
    Matrix::from_fn(r.rows(), r.cols() * width, |i, j| r.get(i, j / width))
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl PsiModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let d = config.n_features;
        let act = config.activation;
        let net = match config.architecture {
            Architecture::Menn => {
                let spec1 = config.menn1_spec();
                let stack1 = build_mask_stack(&spec1, config.band_rounding)?;
                let menn1 = Sequential::new(
                    &mut store,
                    "menn1",
                    &widths(d, &config.menn_hidden, spec1.output_width()),
                    act,
                    Activation::Identity,
                    Some(stack1.matrices.clone()),
                    &mut rng,
                );
                let baseline = store.add("baseline", Matrix::zeros(1, spec1.output_width()));
                let reducer = DenseLayer::new(
                    &mut store,
                    "reducer",
                    spec1.output_width(),
                    config.embed_width,
                    Activation::Identity,
                    None,
                    &mut rng,
                );
                let f_head = Sequential::new(
                    &mut store,
                    "f_head",
                    &widths(config.embed_width, &config.head_hidden, d),
                    act,
                    Activation::Identity,
                    None,
                    &mut rng,
                );
                let spec2 = config.menn2_spec();
                let stack2 = build_mask_stack(&spec2, config.band_rounding)?;
                let menn2 = Sequential::new(
                    &mut store,
                    "menn2",
                    &widths(d, &config.menn2_hidden, spec2.output_width()),
                    act,
                    Activation::Identity,
                    Some(stack2.matrices),
                    &mut rng,
                );
                let sigma_in = spec1.output_width() + spec2.output_width();
                let sigma_masks = match config.sigma_input {
                    SigmaInput::Full => None,
                    SigmaInput::PerFeature => {
                        let owners: Vec<usize> = (0..spec1.output_width())
                            .map(|i| i / config.embed_width)
                            .chain((0..spec2.output_width()).map(|i| i / config.menn2_embed))
                            .collect();
                        let stack = build_mask_stack_for_inputs(
                            &config.sigma_spec(),
                            &owners,
                            config.band_rounding,
                        )?;
                        Some(stack.matrices)
                    }
                };
                let sigma_head = Sequential::new(
                    &mut store,
                    "sigma_head",
                    &widths(sigma_in, &config.sigma_hidden, d),
                    act,
                    Activation::Identity,
                    sigma_masks,
                    &mut rng,
                );
                Net::Menn {
                    menn1,
                    stack1,
                    baseline,
                    reducer,
                    f_head,
                    menn2,
                    sigma_head,
                }
            }
            Architecture::FfnnBaseline => {
                let hidden: Vec<usize> = config
                    .menn_hidden
                    .iter()
                    .chain(&config.head_hidden)
                    .copied()
                    .collect();
                let trunk = Sequential::new(
                    &mut store,
                    "ffnn",
                    &widths(2 * d, &hidden, d),
                    act,
                    Activation::Identity,
                    None,
                    &mut rng,
                );
                let sigma_head = Sequential::new(
                    &mut store,
                    "sigma_head",
                    &widths(3 * d, &config.sigma_hidden, d),
                    act,
                    Activation::Identity,
                    None,
                    &mut rng,
                );
                Net::Ffnn { trunk, sigma_head }
            }
        };
        let phi0 = store.add("phi0", Matrix::zeros(1, 1));
        let log_sigma0 = store.add("log_sigma0", Matrix::filled(1, 1, 0.5f64.ln()));
        Ok(PsiModel {
            config,
            store,
            net,
            phi0,
            log_sigma0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_features(&self) -> usize {
        self.config.n_features
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn phi0(&self) -> f64 {
        self.store.value(self.phi0).get(0, 0)
    }

    pub fn sigma0(&self) -> f64 {
        self.store.value(self.log_sigma0).get(0, 0).exp()
    }

    pub fn phi0_id(&self) -> ParamId {
        self.phi0
    }

    pub fn log_sigma0_id(&self) -> ParamId {
        self.log_sigma0
    }

    /// Mask stack of the embedding network (masked architecture only).
    pub fn mask_stack(&self) -> Option<&MaskStack> {
        match &self.net {
            Net::Menn { stack1, .. } => Some(stack1),
            Net::Ffnn { .. } => None,
        }
    }

    /// Parameter ids on the f-path (embedding, baseline, reducer, f-head or baseline trunk).
    pub fn f_path_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let push_seq = |s: &Sequential, ids: &mut Vec<ParamId>| {
            for l in &s.layers {
                ids.push(l.weight);
                ids.push(l.bias);
            }
        };
        match &self.net {
            Net::Menn {
                menn1,
                baseline,
                reducer,
                f_head,
                ..
            } => {
                push_seq(menn1, &mut ids);
                ids.push(*baseline);
                ids.push(reducer.weight);
                ids.push(reducer.bias);
                push_seq(f_head, &mut ids);
            }
            Net::Ffnn { trunk, .. } => push_seq(trunk, &mut ids),
        }
        ids
    }

    fn check_batch(&self, x: &Matrix, r: &Matrix) -> Result<()> {
        let d = self.n_features();
        if x.cols() != d {
            return Err(Error::shape("model input", d, x.cols()));
        }
        if r.shape() != x.shape() {
            return Err(Error::shape(
                "removal mask",
                format!("{:?}", x.shape()),
                format!("{:?}", r.shape()),
            ));
        }
        if !x.is_finite() {
            return Err(Error::Numeric("model input".into()));
        }
        if r.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("removal mask entries must be 0 or 1".into()));
        }
        Ok(())
    }

    fn embed_graph(&self, g: &mut Graph, x: Var) -> Var {
        match &self.net {
            Net::Menn { menn1, .. } => menn1.forward(g, &self.store, x),
            Net::Ffnn { .. } => unreachable!("embedding requested from the baseline network"),
        }
    }

    /// f-path of the masked network from embeddings `z` under masks `r`; returns `(f, z′)`.
    fn f_from_embedding(&self, g: &mut Graph, z: Var, r: &Matrix) -> (Var, Var) {
        let Net::Menn {
            baseline,
            reducer,
            f_head,
            ..
        } = &self.net
        else {
            unreachable!()
        };
        let dz = self.config.embed_width;
        let rexp = expand_mask(r, dz);
        let keep = rexp.map(|v| 1.0 - v);
        let rexp = g.constant(rexp);
        let keep = g.constant(keep);
        let zr = g.mul(z, rexp);
        let b = g.param(&self.store, *baseline);
        let b = g.broadcast(b, r.rows(), r.cols() * dz);
        let bb = g.mul(b, keep);
        let z_prime = g.add(zr, bb);
        let h = reducer.forward(g, &self.store, z_prime);
        let raw = f_head.forward(g, &self.store, h);
        let rv = g.constant(r.clone());
        (g.mul(raw, rv), z_prime)
    }

    fn ffnn_input(&self, x: &Matrix, r: &Matrix) -> Matrix {
        let d = self.n_features();
        let c = self.config.out_of_support;
        Matrix::from_fn(x.rows(), 2 * d, |i, j| {
            if j < d {
                let keep = r.get(i, j);
                x.get(i, j) * keep + c * (1.0 - keep)
            } else {
                r.get(i, j - d)
            }
        })
    }

    fn ffnn_f(&self, g: &mut Graph, x: &Matrix, r: &Matrix) -> (Var, Var) {
        let Net::Ffnn { trunk, .. } = &self.net else {
            unreachable!()
        };
        let input = g.constant(self.ffnn_input(x, r));
        let raw = trunk.forward(g, &self.store, input);
        let rv = g.constant(r.clone());
        (g.mul(raw, rv), input)
    }

    fn positive(g: &mut Graph, raw: Var) -> Var {
        g.map(raw, |x| {
            (softplus(x) + SIGMA_FLOOR, sigmoid(x))
        })
    }

    /// σ-path; `features` is `z′` (masked) or the baseline input, `f` the f-outputs.
    /// Both are detached before use.
    fn sigma_graph(&self, g: &mut Graph, features: Var, f: Var) -> Var {
        let feats = g.detach(features);
        let f = g.detach(f);
        match &self.net {
            Net::Menn {
                menn2, sigma_head, ..
            } => {
                let o = menn2.forward(g, &self.store, f);
                let input = g.concat_cols(&[feats, o]);
                let raw = sigma_head.forward(g, &self.store, input);
                Self::positive(g, raw)
            }
            Net::Ffnn { sigma_head, .. } => {
                let input = g.concat_cols(&[feats, f]);
                let raw = sigma_head.forward(g, &self.store, input);
                Self::positive(g, raw)
            }
        }
    }

    /// Records a forward pass over the rows of `x` under `mask` (for f and σ)
    /// and under each of `extra` (f only), sharing one embedding pass.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: &Matrix,
        mask: &Matrix,
        extra: &[Matrix],
    ) -> Result<GraphForward> {
        self.check_batch(x, mask)?;
        for e in extra {
            self.check_batch(x, e)?;
        }
        let n = x.rows();
        let d = self.n_features();
        let groups = 1 + extra.len();
        let mut all_masks = Matrix::zeros(n * groups, d);
        for (k, m) in std::iter::once(mask).chain(extra).enumerate() {
            all_masks.data_mut()[k * n * d..(k + 1) * n * d].copy_from_slice(m.data());
        }
        let (f_all, features) = match self.net {
            Net::Menn { .. } => {
                let xv = g.constant(x.clone());
                let z = self.embed_graph(g, xv);
                let z_all = if groups > 1 { g.tile_rows(z, groups) } else { z };
                let (f_all, zp_all) = self.f_from_embedding(g, z_all, &all_masks);
                let zp = if groups > 1 {
                    g.slice_rows(zp_all, 0, n)
                } else {
                    zp_all
                };
                (f_all, zp)
            }
            Net::Ffnn { .. } => {
                let mut x_all = Matrix::zeros(n * groups, d);
                for k in 0..groups {
                    x_all.data_mut()[k * n * d..(k + 1) * n * d].copy_from_slice(x.data());
                }
                let (f_all, input_all) = self.ffnn_f(g, &x_all, &all_masks);
                let input = if groups > 1 {
                    g.slice_rows(input_all, 0, n)
                } else {
                    input_all
                };
                (f_all, input)
            }
        };
        let (f, f_extra) = if groups > 1 {
            let f = g.slice_rows(f_all, 0, n);
            let extra = (1..groups).map(|k| g.slice_rows(f_all, k * n, n)).collect();
            (f, extra)
        } else {
            (f_all, Vec::new())
        };
        let sigma = self.sigma_graph(g, features, f);
        let phi0 = g.param(&self.store, self.phi0);
        let ls0 = g.param(&self.store, self.log_sigma0);
        let sigma0 = g.exp(ls0);
        Ok(GraphForward {
            f,
            sigma,
            f_extra,
            phi0,
            sigma0,
        })
    }

    /// Per-feature outputs and scales for every row of `x` under masks `r`.
    pub fn predict(&self, x: &Matrix, r: &Matrix) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, x, r, &[])?;
        Ok(Prediction {
            f: g.value(out.f).clone(),
            sigma: g.value(out.sigma).clone(),
        })
    }

    /// Full-feature prediction.
    pub fn predict_full(&self, x: &Matrix) -> Result<Prediction> {
        self.predict(x, &Matrix::filled(x.rows(), x.cols(), 1.0))
    }

    /// f-outputs only (skips the σ-path).
    pub fn predict_f(&self, x: &Matrix, r: &Matrix) -> Result<Matrix> {
        self.check_batch(x, r)?;
        let mut g = Graph::new();
        let f = match self.net {
            Net::Menn { .. } => {
                let xv = g.constant(x.clone());
                let z = self.embed_graph(&mut g, xv);
                self.f_from_embedding(&mut g, z, r).0
            }
            Net::Ffnn { .. } => self.ffnn_f(&mut g, x, r).0,
        };
        Ok(g.value(f).clone())
    }

    /// `f(x_S) = Σ_d f_d(x_S)` for one input under many coalitions.
    pub fn coalition_values(&self, x: &[f64], subsets: &[FeatureSubset]) -> Result<Vec<f64>> {
        let d = self.n_features();
        if x.len() != d {
            return Err(Error::shape("coalition_values", d, x.len()));
        }
        let xs = Matrix::from_fn(subsets.len(), d, |_, j| x[j]);
        let r = Matrix::from_fn(subsets.len(), d, |i, j| f64::from(u8::from(subsets[i].contains(j))));
        let f = self.predict_f(&xs, &r)?;
        Ok((0..subsets.len()).map(|i| f.row(i).iter().sum()).collect())
    }

    /// `D × D_z` embedding matrix of a single input.
    pub fn embed_features(&self, x: &[f64]) -> Result<Matrix> {
        let d = self.n_features();
        if !matches!(self.net, Net::Menn { .. }) {
            return Err(Error::Config("the feed-forward baseline has no feature embeddings".into()));
        }
        if x.len() != d {
            return Err(Error::shape("embed_features", d, x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embed_features input".into()));
        }
        let mut g = Graph::new();
        let xv = g.constant(Matrix::row_vector(x));
        let z = self.embed_graph(&mut g, xv);
        Matrix::from_vec(d, self.config.embed_width, g.value(z).data().to_vec())
    }

    /// Learned baseline embeddings as a `D × D_z` matrix.
    pub fn baseline_table(&self) -> Option<Matrix> {
        match &self.net {
            Net::Menn { baseline, .. } => Some(
                Matrix::from_vec(
                    self.n_features(),
                    self.config.embed_width,
                    self.store.value(*baseline).data().to_vec(),
                )
                .expect("baseline shape"),
            ),
            Net::Ffnn { .. } => None,
        }
    }

    /// Per-feature outputs `f_d(x_S)` for a single input.
    pub fn forward_f(&self, x: &[f64], r: &RemovalMask) -> Result<Vec<f64>> {
        let (xm, rm) = self.single(x, r)?;
        Ok(self.predict_f(&xm, &rm)?.into_vec())
    }

    /// Attribution scales for a single input, given the f-outputs for the same `(x, r)`.
    pub fn forward_sigma(&self, x: &[f64], r: &RemovalMask, f_values: &[f64]) -> Result<Vec<f64>> {
        let (xm, rm) = self.single(x, r)?;
        let d = self.n_features();
        if f_values.len() != d {
            return Err(Error::shape("forward_sigma f_values", d, f_values.len()));
        }
        let mut g = Graph::new();
        let features = match self.net {
            Net::Menn { .. } => {
                let xv = g.constant(xm);
                let z = self.embed_graph(&mut g, xv);
                self.f_from_embedding(&mut g, z, &rm).1
            }
            Net::Ffnn { .. } => g.constant(self.ffnn_input(&xm, &rm)),
        };
        let f = g.constant(Matrix::row_vector(f_values));
        let s = self.sigma_graph(&mut g, features, f);
        Ok(g.value(s).data().to_vec())
    }

    /// Per-feature outputs of the feed-forward baseline for a single input.
    pub fn forward_ffnn_baseline(&self, x: &[f64], r: &RemovalMask) -> Result<Vec<f64>> {
        if !matches!(self.net, Net::Ffnn { .. }) {
            return Err(Error::Config("model was not built as the feed-forward baseline".into()));
        }
        self.forward_f(x, r)
    }

    fn single(&self, x: &[f64], r: &RemovalMask) -> Result<(Matrix, Matrix)> {
        let d = self.n_features();
        if x.len() != d || r.len() != d {
            return Err(Error::shape("single-instance forward", d, format!("{}/{}", x.len(), r.len())));
        }
        Ok((Matrix::row_vector(x), Matrix::row_vector(&r.to_f64())))
    }
}

/// Row `d` of the result is `z_d` when feature `d` is present and `b_d` otherwise.
pub fn substitute_baselines(z: &Matrix, r: &RemovalMask, baseline: &Matrix) -> Result<Matrix> {
    if z.shape() != baseline.shape() || z.rows() != r.len() {
        return Err(Error::shape(
            "substitute_baselines",
            format!("{:?} with {} mask bits", z.shape(), z.rows()),
            format!("{:?} with {} mask bits", baseline.shape(), r.len()),
        ));
    }
    let mut out = z.clone();
    for d in 0..z.rows() {
        if !r.is_present(d) {
            out.row_mut(d).copy_from_slice(baseline.row(d));
        }
    }
    Ok(out)
}
