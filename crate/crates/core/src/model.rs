//! The multimodal network: per-modality MLP encoders, bias-free decomposition
//! projections, per-modality unimodal heads, and a concatenation fusion head.
//!
//! Forward passes return a [`SampleCache`] holding every activation needed for
//! an exact reverse pass. [`CpscModel::backward`] accumulates into the grads of
//! each [`ParamBlock`] it reaches, one loss head at a time, each scaled by its
//! own seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, CpscError, Result};
use crate::numeric::{
    cross_entropy, cross_entropy_logit_grad, relu, relu_backward, softmax, ParamBlock,
    Parameterized, Tensor2D,
};
use crate::rsc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input width of each modality; its length is the modality count.
    pub input_dims: Vec<usize>,
    /// Hidden width of every encoder.
    pub hidden_dim: usize,
    /// Encoder output width `d`.
    pub feature_dim: usize,
    /// Number of components `n` per modality.
    pub components: usize,
    /// Components kept by the top-K reconstruction.
    pub top_k: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dims: vec![16, 16],
            hidden_dim: 32,
            feature_dim: 8,
            components: 4,
            top_k: 2,
            classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn modalities(&self) -> usize {
        self.input_dims.len()
    }

    /// Width of the decomposition output, `n · d`.
    pub fn high_dim(&self) -> usize {
        self.components * self.feature_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CpscError::Config(m));
        if self.modalities() < 2 {
            return bad(format!("need at least 2 modalities, got {}", self.modalities()));
        }
        if self.input_dims.contains(&0) || self.hidden_dim == 0 || self.feature_dim == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.components < 2 {
            return bad(format!("need at least 2 components, got {}", self.components));
        }
        if self.top_k == 0 || self.top_k > self.components {
            return bad(format!(
                "top_k must be in 1..={}, got {}",
                self.components, self.top_k
            ));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        Ok(())
    }
}

/// Affine layer `y = W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamBlock,
    pub bias: ParamBlock,
}

impl Linear {
    fn init(name: &str, inputs: usize, outputs: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let w = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: ParamBlock::new(
                format!("{name}.weight"),
                Tensor2D::from_vec(outputs, inputs, w).expect("shape"),
            ),
            bias: ParamBlock::new(format!("{name}.bias"), Tensor2D::zeros(1, outputs)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.value.matvec(x)?;
        for (yi, b) in y.iter_mut().zip(self.bias.value.data()) {
            *yi += b;
        }
        Ok(y)
    }

    /// Accumulates parameter grads and returns the gradient w.r.t. `x`.
    fn backward(&mut self, x: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
        self.weight.grad.add_outer(grad_out, x, 1.0)?;
        for (gb, g) in self.bias.grad.data_mut().iter_mut().zip(grad_out) {
            *gb += g;
        }
        self.weight.value.matvec_t(grad_out)
    }
}

/// Two-layer MLP: `input → hidden (ReLU) → d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCache {
    pub input: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompCache {
    /// `W_dec · h` before the ReLU.
    pub pre: Vec<f64>,
    pub components: Vec<Vec<f64>>,
}

/// How a modality's representation reached the heads.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureRoute {
    /// Encoder output fed directly.
    Raw,
    /// Mean of the selected decomposition components.
    Reconstructed { selected: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityCache {
    pub encoder: EncoderCache,
    pub decomp: Option<DecompCache>,
    pub route: FeatureRoute,
    /// What the unimodal and fusion heads consumed (`h` or `h̃`).
    pub head_input: Vec<f64>,
    pub unimodal_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleCache {
    pub version: u64,
    pub label: usize,
    pub modalities: Vec<ModalityCache>,
    pub fused_input: Vec<f64>,
    pub fused_probs: Vec<f64>,
}

impl SampleCache {
    pub fn fused_loss(&self) -> f64 {
        cross_entropy(&self.fused_probs, self.label).expect("label validated at forward")
    }

    pub fn unimodal_loss(&self, m: usize) -> f64 {
        cross_entropy(&self.modalities[m].unimodal_probs, self.label)
            .expect("label validated at forward")
    }
}

/// Scale factor per loss head for one sample's reverse pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSeeds {
    pub fused: f64,
    pub unimodal: Vec<f64>,
    pub diversity: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl HeadSeeds {
    pub fn zeros(modalities: usize) -> Self {
        Self {
            fused: 0.0,
            unimodal: vec![0.0; modalities],
            diversity: vec![0.0; modalities],
            lambda1: 0.0,
            lambda2: 0.0,
        }
    }

    pub fn fused_only(modalities: usize, scale: f64) -> Self {
        Self {
            fused: scale,
            ..Self::zeros(modalities)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpscModel {
    config: ModelConfig,
    pub encoders: Vec<Encoder>,
    /// Bias-free `l × d` projections.
    pub decomposers: Vec<ParamBlock>,
    pub unimodal_heads: Vec<Linear>,
    pub fusion: Linear,
    version: u64,
}

impl CpscModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.feature_dim;
        let k = config.classes;
        let mut encoders = Vec::new();
        let mut decomposers = Vec::new();
        let mut unimodal_heads = Vec::new();
        for (m, &input) in config.input_dims.iter().enumerate() {
            let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
            encoders.push(Encoder {
                hidden: Linear::init(&format!("enc{m}.hidden"), input, config.hidden_dim, he(input), &mut rng),
                output: Linear::init(
                    &format!("enc{m}.output"),
                    config.hidden_dim,
                    d,
                    (6.0 / (config.hidden_dim + d) as f64).sqrt(),
                    &mut rng,
                ),
            });
            // Stacked identities plus a small perturbation: every component
            // starts as a near copy of the non-negative part of h.
            let l = config.high_dim();
            let mut w = Tensor2D::zeros(l, d);
            for r in 0..l {
                for c in 0..d {
                    let base = if r % d == c { 1.0 } else { 0.0 };
                    w.set(r, c, base + rng.random_range(-0.1..0.1));
                }
            }
            decomposers.push(ParamBlock::new(format!("dec{m}.weight"), w));
            unimodal_heads.push(Linear::init(
                &format!("uni{m}"),
                d,
                k,
                (6.0 / (d + k) as f64).sqrt(),
                &mut rng,
            ));
        }
        let fused_in = d * config.modalities();
        let fusion = Linear::init("fusion", fused_in, k, (6.0 / (fused_in + k) as f64).sqrt(), &mut rng);
        Ok(Self {
            config,
            encoders,
            decomposers,
            unimodal_heads,
            fusion,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn modalities(&self) -> usize {
        self.config.modalities()
    }

    /// Bumped whenever parameters may have been mutated.
    pub fn version(&self) -> u64 {
        self.version
    }

    fn check_modality(&self, m: usize) -> Result<()> {
        if m >= self.modalities() {
            return Err(CpscError::Index {
                index: m,
                len: self.modalities(),
            });
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.config.classes {
            return Err(CpscError::Index {
                index: label,
                len: self.config.classes,
            });
        }
        Ok(())
    }

    pub fn encode(&self, m: usize, x: &[f64]) -> Result<EncoderCache> {
        self.check_modality(m)?;
        let enc = &self.encoders[m];
        if x.len() != enc.hidden.inputs() {
            return Err(dim_err(format!(
                "modality {m} expects {} inputs, got {}",
                enc.hidden.inputs(),
                x.len()
            )));
        }
        let hidden_pre = enc.hidden.forward(x)?;
        let hidden = relu(&hidden_pre);
        let feature = enc.output.forward(&hidden)?;
        Ok(EncoderCache {
            input: x.to_vec(),
            hidden_pre,
            hidden,
            feature,
        })
    }

    /// `ReLU(W_dec · h)` split into `n` contiguous chunks of width `d`.
    pub fn decompose(&self, m: usize, h: &[f64]) -> Result<DecompCache> {
        self.check_modality(m)?;
        let pre = self.decomposers[m].value.matvec(h)?;
        let high = relu(&pre);
        let components = high
            .chunks(self.config.feature_dim)
            .map(<[f64]>::to_vec)
            .collect();
        Ok(DecompCache { pre, components })
    }

    pub fn unimodal_predict(&self, m: usize, c: &[f64]) -> Result<Vec<f64>> {
        self.check_modality(m)?;
        softmax(&self.unimodal_heads[m].forward(c)?)
    }

    /// Concatenates the per-modality features in modality order and applies
    /// the fusion head.
    pub fn fuse_predict(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        softmax(&self.fusion.forward(&self.concat(features)?)?)
    }

    /// Raw-path fused and unimodal probabilities without building a cache.
    pub fn predict_raw(&self, inputs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if inputs.len() != self.modalities() {
            return Err(dim_err(format!(
                "expected {} modalities, got {}",
                self.modalities(),
                inputs.len()
            )));
        }
        let features = inputs
            .iter()
            .enumerate()
            .map(|(m, x)| Ok(self.encode(m, x)?.feature))
            .collect::<Result<Vec<_>>>()?;
        let unimodal = features
            .iter()
            .enumerate()
            .map(|(m, h)| self.unimodal_predict(m, h))
            .collect::<Result<Vec<_>>>()?;
        Ok((self.fuse_predict(&features)?, unimodal))
    }

    fn concat(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        if features.len() != self.modalities() {
            return Err(dim_err(format!(
                "fusion expects {} modalities, got {}",
                self.modalities(),
                features.len()
            )));
        }
        let d = self.config.feature_dim;
        let mut out = Vec::with_capacity(d * features.len());
        for (m, f) in features.iter().enumerate() {
            if f.len() != d {
                return Err(dim_err(format!("modality {m} feature has width {}, expected {d}", f.len())));
            }
            out.extend_from_slice(f);
        }
        Ok(out)
    }

    fn finish(&self, label: usize, modalities: Vec<ModalityCache>) -> Result<SampleCache> {
        let heads: Vec<Vec<f64>> = modalities.iter().map(|mc| mc.head_input.clone()).collect();
        let fused_input = self.concat(&heads)?;
        let fused_probs = softmax(&self.fusion.forward(&fused_input)?)?;
        Ok(SampleCache {
            version: self.version,
            label,
            modalities,
            fused_input,
            fused_probs,
        })
    }

    /// Encoders feed the heads directly; no decomposition.
    pub fn forward_raw(&self, inputs: &[Vec<f64>], label: usize) -> Result<SampleCache> {
        self.check_label(label)?;
        if inputs.len() != self.modalities() {
            return Err(dim_err(format!(
                "expected {} modalities, got {}",
                self.modalities(),
                inputs.len()
            )));
        }
        let mut mods = Vec::with_capacity(inputs.len());
        for (m, x) in inputs.iter().enumerate() {
            let encoder = self.encode(m, x)?;
            let head_input = encoder.feature.clone();
            let unimodal_probs = self.unimodal_predict(m, &head_input)?;
            mods.push(ModalityCache {
                encoder,
                decomp: None,
                route: FeatureRoute::Raw,
                head_input,
                unimodal_probs,
            });
        }
        self.finish(label, mods)
    }

    /// Decomposes each modality and feeds the mean of the components picked by
    /// `select(m, components)` to the heads.
    pub fn forward_reconstructed<S>(&self, inputs: &[Vec<f64>], label: usize, mut select: S) -> Result<SampleCache>
    where
        S: FnMut(usize, &[Vec<f64>]) -> Result<Vec<usize>>,
    {
        self.check_label(label)?;
        if inputs.len() != self.modalities() {
            return Err(dim_err(format!(
                "expected {} modalities, got {}",
                self.modalities(),
                inputs.len()
            )));
        }
        let mut mods = Vec::with_capacity(inputs.len());
        for (m, x) in inputs.iter().enumerate() {
            let encoder = self.encode(m, x)?;
            let decomp = self.decompose(m, &encoder.feature)?;
            let selected = select(m, &decomp.components)?;
            if selected.is_empty() || selected.iter().any(|&k| k >= decomp.components.len()) {
                return Err(CpscError::Config(format!("invalid component selection {selected:?}")));
            }
            let head_input = rsc::mean_of(&decomp.components, &selected);
            let unimodal_probs = self.unimodal_predict(m, &head_input)?;
            mods.push(ModalityCache {
                encoder,
                decomp: Some(decomp),
                route: FeatureRoute::Reconstructed { selected },
                head_input,
                unimodal_probs,
            });
        }
        self.finish(label, mods)
    }

    /// Total loss of one cached sample under the given seeds, matching what
    /// [`backward`](Self::backward) differentiates.
    pub fn seeded_loss(&self, cache: &SampleCache, seeds: &HeadSeeds) -> Result<f64> {
        let mut total = seeds.fused * cache.fused_loss();
        for (m, mc) in cache.modalities.iter().enumerate() {
            total += seeds.unimodal[m] * cache.unimodal_loss(m);
            if seeds.diversity[m] != 0.0 {
                let decomp = mc.decomp.as_ref().ok_or_else(|| {
                    CpscError::Config("diversity loss needs decomposed features".into())
                })?;
                let terms = rsc::diversity_loss(&mc.encoder.feature, &decomp.components, seeds.lambda1, seeds.lambda2)?;
                total += seeds.diversity[m] * terms.total;
            }
        }
        Ok(total)
    }

    /// Reverse pass of one sample. Grads are accumulated, never overwritten.
    pub fn backward(&mut self, cache: &SampleCache, seeds: &HeadSeeds) -> Result<()> {
        if cache.version != self.version {
            return Err(CpscError::Consistency {
                cached: cache.version,
                current: self.version,
            });
        }
        let m_count = self.modalities();
        if seeds.unimodal.len() != m_count || seeds.diversity.len() != m_count {
            return Err(dim_err(format!(
                "seeds for {} / {} modalities, model has {m_count}",
                seeds.unimodal.len(),
                seeds.diversity.len()
            )));
        }
        let d = self.config.feature_dim;

        let mut head_grads = vec![vec![0.0; d]; m_count];
        if seeds.fused != 0.0 {
            let g: Vec<f64> = cross_entropy_logit_grad(&cache.fused_probs, cache.label)?
                .into_iter()
                .map(|x| x * seeds.fused)
                .collect();
            let d_concat = self.fusion.backward(&cache.fused_input, &g)?;
            for (m, chunk) in d_concat.chunks(d).enumerate() {
                head_grads[m].copy_from_slice(chunk);
            }
        }

        for (m, mc) in cache.modalities.iter().enumerate() {
            if seeds.unimodal[m] != 0.0 {
                let g: Vec<f64> = cross_entropy_logit_grad(&mc.unimodal_probs, cache.label)?
                    .into_iter()
                    .map(|x| x * seeds.unimodal[m])
                    .collect();
                let dx = self.unimodal_heads[m].backward(&mc.head_input, &g)?;
                for (a, b) in head_grads[m].iter_mut().zip(dx) {
                    *a += b;
                }
            }

            let mut d_feature = vec![0.0; d];
            match (&mc.route, &mc.decomp) {
                (FeatureRoute::Raw, _) => {
                    for (a, b) in d_feature.iter_mut().zip(&head_grads[m]) {
                        *a += b;
                    }
                    if seeds.diversity[m] != 0.0 {
                        return Err(CpscError::Config(
                            "diversity loss needs decomposed features".into(),
                        ));
                    }
                }
                (FeatureRoute::Reconstructed { selected }, Some(decomp)) => {
                    let n = decomp.components.len();
                    let mut d_comps = vec![vec![0.0; d]; n];
                    let share = 1.0 / selected.len() as f64;
                    for &k in selected {
                        for (a, b) in d_comps[k].iter_mut().zip(&head_grads[m]) {
                            *a += share * b;
                        }
                    }
                    if seeds.diversity[m] != 0.0 {
                        let (dh, dc) = rsc::diversity_loss_grad(
                            &mc.encoder.feature,
                            &decomp.components,
                            seeds.lambda1,
                            seeds.lambda2,
                        )?;
                        let s = seeds.diversity[m];
                        for (a, b) in d_feature.iter_mut().zip(dh) {
                            *a += s * b;
                        }
                        for (dk, ck) in d_comps.iter_mut().zip(dc) {
                            for (a, b) in dk.iter_mut().zip(ck) {
                                *a += s * b;
                            }
                        }
                    }
                    let d_high: Vec<f64> = d_comps.concat();
                    let d_pre = relu_backward(&decomp.pre, &d_high);
                    self.decomposers[m]
                        .grad
                        .add_outer(&d_pre, &mc.encoder.feature, 1.0)?;
                    let dh = self.decomposers[m].value.matvec_t(&d_pre)?;
                    for (a, b) in d_feature.iter_mut().zip(dh) {
                        *a += b;
                    }
                }
                (FeatureRoute::Reconstructed { .. }, None) => {
                    return Err(CpscError::Config("reconstructed route without decomposition".into()));
                }
            }

            let enc = &mut self.encoders[m];
            let d_hidden = enc.output.backward(&mc.encoder.hidden, &d_feature)?;
            let d_hidden_pre = relu_backward(&mc.encoder.hidden_pre, &d_hidden);
            enc.hidden.backward(&mc.encoder.input, &d_hidden_pre)?;
        }
        Ok(())
    }

    /// Flattened copy of every parameter value, in `params()` order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }
}

impl Parameterized for CpscModel {
    fn params(&self) -> Vec<&ParamBlock> {
        let mut out = Vec::new();
        for m in 0..self.modalities() {
            let e = &self.encoders[m];
            out.extend([&e.hidden.weight, &e.hidden.bias, &e.output.weight, &e.output.bias]);
            out.push(&self.decomposers[m]);
            let u = &self.unimodal_heads[m];
            out.extend([&u.weight, &u.bias]);
        }
        out.extend([&self.fusion.weight, &self.fusion.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        self.version += 1;
        let mut out = Vec::new();
        for ((e, dec), u) in self
            .encoders
            .iter_mut()
            .zip(self.decomposers.iter_mut())
            .zip(self.unimodal_heads.iter_mut())
        {
            out.extend([
                &mut e.hidden.weight,
                &mut e.hidden.bias,
                &mut e.output.weight,
                &mut e.output.bias,
            ]);
            out.push(dec);
            out.extend([&mut u.weight, &mut u.bias]);
        }
        out.extend([&mut self.fusion.weight, &mut self.fusion.bias]);
        out
    }

    fn zero_grads(&mut self) {
        // Grad-only mutation leaves caches valid.
        let v = self.version;
        for p in self.params_mut() {
            p.zero_grad();
        }
        self.version = v;
    }
}
