//! Audio-visual sync losses, region-masked attention and the conditioning
//! features fed to the radiance field, plus a small trainable AV encoder.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::nn::Mlp;
use crate::optim::{AdamConfig, AdamW, GroupRate};
use crate::radiance_field::ConditioningFeatures;

/// Clamp margin for the similarity inside the sync cross-entropy.
pub const SYNC_EPS: f64 = 1e-7;

/// Blendshape coefficient names in capture order.
pub const BLENDSHAPE_NAMES: [&str; 52] = [
    "eyeBlinkLeft",
    "eyeLookDownLeft",
    "eyeLookInLeft",
    "eyeLookOutLeft",
    "eyeLookUpLeft",
    "eyeSquintLeft",
    "eyeWideLeft",
    "eyeBlinkRight",
    "eyeLookDownRight",
    "eyeLookInRight",
    "eyeLookOutRight",
    "eyeLookUpRight",
    "eyeSquintRight",
    "eyeWideRight",
    "jawForward",
    "jawRight",
    "jawLeft",
    "jawOpen",
    "mouthClose",
    "mouthFunnel",
    "mouthPucker",
    "mouthRight",
    "mouthLeft",
    "mouthSmileLeft",
    "mouthSmileRight",
    "mouthFrownLeft",
    "mouthFrownRight",
    "mouthDimpleLeft",
    "mouthDimpleRight",
    "mouthStretchLeft",
    "mouthStretchRight",
    "mouthRollLower",
    "mouthRollUpper",
    "mouthShrugLower",
    "mouthShrugUpper",
    "mouthPressLeft",
    "mouthPressRight",
    "mouthLowerDownLeft",
    "mouthLowerDownRight",
    "mouthUpperUpLeft",
    "mouthUpperUpRight",
    "browDownLeft",
    "browDownRight",
    "browInnerUp",
    "browOuterUpLeft",
    "browOuterUpRight",
    "cheekPuff",
    "cheekSquintLeft",
    "cheekSquintRight",
    "noseSneerLeft",
    "noseSneerRight",
    "tongueOut",
];

/// Brow and eye coefficients that drive the expression features.
pub const DEFAULT_CORE_INDICES: [usize; 7] = [41, 42, 43, 44, 45, 0, 7];

pub fn blendshape_index(name: &str) -> Option<usize> {
    BLENDSHAPE_NAMES.iter().position(|n| *n == name)
}

/// Cosine similarity in `[-1, 1]`.
pub fn cosine_sim(f: &[f64], a: &[f64]) -> Result<f64> {
    ensure_len("cosine operands", f.len(), a.len())?;
    let nf = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nf == 0.0 || na == 0.0 {
        return Err(Error::ZeroNorm("cosine similarity"));
    }
    let dot: f64 = f.iter().zip(a).map(|(x, y)| x * y).sum();
    Ok((dot / (nf * na)).clamp(-1.0, 1.0))
}

fn clamp_sim(sim: f64) -> f64 {
    sim.max(0.0).clamp(SYNC_EPS, 1.0 - SYNC_EPS)
}

/// Binary cross-entropy on the clamped similarity.
pub fn sync_loss(sim: f64, synced: bool) -> f64 {
    let s = clamp_sim(sim);
    if synced {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

/// Derivative of [`sync_loss`] with respect to the raw similarity.
pub fn sync_loss_grad(sim: f64, synced: bool) -> f64 {
    if !(sim > SYNC_EPS && sim < 1.0 - SYNC_EPS) {
        return 0.0;
    }
    if synced {
        -1.0 / sim
    } else {
        1.0 / (1.0 - sim)
    }
}

/// Mean absolute error.
pub fn recon_loss(truth: &[f64], pred: &[f64]) -> Result<f64> {
    ensure_len("reconstruction", truth.len(), pred.len())?;
    if truth.is_empty() {
        return Err(Error::invalid("reconstruction", "empty input"));
    }
    Ok(truth.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / truth.len() as f64)
}

/// Attention over a flat channel vector with disjoint lip and expression
/// masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionAttention {
    pub v: Vec<f64>,
    pub lip_mask: Vec<f64>,
    pub expr_mask: Vec<f64>,
}

impl RegionAttention {
    pub fn new(v: Vec<f64>, lip_mask: Vec<f64>, expr_mask: Vec<f64>) -> Result<Self> {
        let a = Self { v, lip_mask, expr_mask };
        a.validate()?;
        Ok(a)
    }

    /// All-ones attention; the first `lip` channels belong to the lip mask,
    /// the next `expr` to the expression mask.
    pub fn split(lip: usize, expr: usize) -> Self {
        let n = lip + expr;
        Self {
            v: vec![1.0; n],
            lip_mask: (0..n).map(|i| if i < lip { 1.0 } else { 0.0 }).collect(),
            expr_mask: (0..n).map(|i| if i < lip { 0.0 } else { 1.0 }).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_len("lip mask", self.v.len(), self.lip_mask.len())?;
        ensure_len("expression mask", self.v.len(), self.expr_mask.len())?;
        if self.v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("attention vector", "non-finite entry"));
        }
        for (i, (l, e)) in self.lip_mask.iter().zip(&self.expr_mask).enumerate() {
            if !(0.0..=1.0).contains(l) || !(0.0..=1.0).contains(e) {
                return Err(Error::invalid("attention masks", format!("channel {i} outside [0, 1]")));
            }
            if l * e != 0.0 {
                return Err(Error::invalid("attention masks", format!("channel {i} is in both regions")));
            }
        }
        Ok(())
    }
}

/// `(V ⊙ M_lip, V ⊙ M_exp)`.
pub fn masked_attention(att: &RegionAttention) -> (Vec<f64>, Vec<f64>) {
    let lip = att.v.iter().zip(&att.lip_mask).map(|(v, m)| v * m).collect();
    let expr = att.v.iter().zip(&att.expr_mask).map(|(v, m)| v * m).collect();
    (lip, expr)
}

/// `f_l = f_lip ⊙ V_lip`, `f_e = f_exp ⊙ V_exp`.
pub fn disentangle_features(f_lip: &[f64], f_exp: &[f64], v_lip: &[f64], v_exp: &[f64]) -> Result<ConditioningFeatures> {
    ensure_len("lip attention", f_lip.len(), v_lip.len())?;
    ensure_len("expression attention", f_exp.len(), v_exp.len())?;
    Ok(ConditioningFeatures {
        lip: f_lip.iter().zip(v_lip).map(|(a, b)| a * b).collect(),
        expr: f_exp.iter().zip(v_exp).map(|(a, b)| a * b).collect(),
    })
}

/// 52 blendshape coefficients in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendshapeCoeffs {
    values: Vec<f64>,
}

impl BlendshapeCoeffs {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure_len("blendshape coefficients", BLENDSHAPE_NAMES.len(), values.len())?;
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("blendshape coefficients", format!("{} = {v}", BLENDSHAPE_NAMES[i])));
        }
        Ok(Self { values })
    }

    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; BLENDSHAPE_NAMES.len()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn validate_core_indices(indices: &[usize]) -> Result<()> {
    for (k, &i) in indices.iter().enumerate() {
        if i >= BLENDSHAPE_NAMES.len() || indices[..k].contains(&i) {
            return Err(Error::invalid("core expression indices", format!("{indices:?}")));
        }
    }
    Ok(())
}

/// Gathers the core coefficients in the given order.
pub fn select_core_expression(b: &BlendshapeCoeffs, indices: &[usize]) -> Result<Vec<f64>> {
    validate_core_indices(indices)?;
    Ok(indices.iter().map(|&i| b.values[i]).collect())
}

/// Writes `values` back at `indices`; inverse of the gather on those slots.
pub fn scatter_core_expression(b: &mut BlendshapeCoeffs, indices: &[usize], values: &[f64]) -> Result<()> {
    validate_core_indices(indices)?;
    ensure_len("core expression values", indices.len(), values.len())?;
    for (&i, &v) in indices.iter().zip(values) {
        b.values[i] = v.clamp(0.0, 1.0);
    }
    Ok(())
}

/// Turns per-frame lip features and blendshapes into field conditioning.
/// The attention vector spans `[lip channels | core expression channels]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningPipeline {
    pub attention: RegionAttention,
    pub core_indices: Vec<usize>,
}

impl ConditioningPipeline {
    pub fn new(lip_width: usize) -> Self {
        Self {
            attention: RegionAttention::split(lip_width, DEFAULT_CORE_INDICES.len()),
            core_indices: DEFAULT_CORE_INDICES.to_vec(),
        }
    }

    pub fn lip_width(&self) -> usize {
        self.attention.v.len() - self.core_indices.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        validate_core_indices(&self.core_indices)?;
        if self.attention.v.len() < self.core_indices.len() {
            return Err(Error::invalid("attention vector", "shorter than the expression channels"));
        }
        Ok(())
    }

    pub fn features(&self, f_lip: &[f64], b: &BlendshapeCoeffs) -> Result<ConditioningFeatures> {
        self.validate()?;
        let nl = self.lip_width();
        ensure_len("lip features", nl, f_lip.len())?;
        let f_exp = select_core_expression(b, &self.core_indices)?;
        let (v_lip, v_exp) = masked_attention(&self.attention);
        disentangle_features(f_lip, &f_exp, &v_lip[..nl], &v_exp[nl..])
    }
}

/// Paired face/audio features with a sync label.
#[derive(Clone, Debug, PartialEq)]
pub struct AvWindow {
    pub face: Vec<f64>,
    pub audio: Vec<f64>,
    pub synced: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvOptimizer {
    Adam,
    /// Plain full-batch gradient descent.
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AvEncoderConfig {
    pub hidden_width: usize,
    pub embed_width: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: AvOptimizer,
    /// Keeps the face branch at its initialization.
    pub freeze_face: bool,
    /// Rectify embeddings so similarities are nonnegative.
    pub rectify: bool,
}

impl Default for AvEncoderConfig {
    fn default() -> Self {
        Self {
            hidden_width: 32,
            embed_width: 32,
            epochs: 300,
            lr: 1e-2,
            seed: 0,
            optimizer: AvOptimizer::Adam,
            freeze_face: false,
            rectify: true,
        }
    }
}

/// Two dense layers per branch and a linear decoder from the joined
/// embeddings back to the face features.
#[derive(Clone, Debug, PartialEq)]
pub struct AvEncoder {
    pub audio_net: Mlp,
    pub face_net: Mlp,
    pub decoder: Mlp,
    rectify: bool,
}

/// Per-epoch training losses (before that epoch's update) and the final one.
#[derive(Clone, Debug, PartialEq)]
pub struct AvTraining {
    pub encoder: AvEncoder,
    pub history: Vec<f64>,
    pub final_loss: f64,
}

struct AvForward {
    loss: f64,
    d_audio: Array2<f64>,
    d_face: Array2<f64>,
    d_decoder: Vec<f64>,
    tapes: (crate::nn::MlpTape, crate::nn::MlpTape),
}

impl AvEncoder {
    pub fn new(face_dim: usize, audio_dim: usize, config: &AvEncoderConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut audio_net = Mlp::new(&[audio_dim, config.hidden_width, config.embed_width])?;
        let mut face_net = Mlp::new(&[face_dim, config.hidden_width, config.embed_width])?;
        let mut decoder = Mlp::new(&[2 * config.embed_width, face_dim])?;
        audio_net.init(&mut rng);
        face_net.init(&mut rng);
        decoder.init(&mut rng);
        Ok(Self {
            audio_net,
            face_net,
            decoder,
            rectify: config.rectify,
        })
    }

    fn activate(&self, x: Array2<f64>) -> Array2<f64> {
        if self.rectify {
            x.mapv(|v| v.max(0.0))
        } else {
            x
        }
    }

    fn embed(&self, net: &Mlp, x: &[f64]) -> Vec<f64> {
        let out = net.predict_one(x);
        if self.rectify {
            out.into_iter().map(|v| v.max(0.0)).collect()
        } else {
            out
        }
    }

    /// Audio embedding; this is what drives the lip features.
    pub fn audio_features(&self, audio: &[f64]) -> Vec<f64> {
        self.embed(&self.audio_net, audio)
    }

    pub fn face_features(&self, face: &[f64]) -> Vec<f64> {
        self.embed(&self.face_net, face)
    }

    /// Similarity of the two embeddings; 0 when either embedding vanishes.
    pub fn similarity(&self, w: &AvWindow) -> f64 {
        cosine_sim(&self.face_features(&w.face), &self.audio_features(&w.audio)).unwrap_or(0.0)
    }

    /// Fraction of windows whose `sim > 0.5` decision matches the label.
    pub fn accuracy(&self, data: &[AvWindow]) -> f64 {
        let hits = data.iter().filter(|w| (self.similarity(w) > 0.5) == w.synced).count();
        hits as f64 / data.len().max(1) as f64
    }

    /// Mean of sync plus reconstruction loss over the dataset.
    pub fn loss(&self, data: &[AvWindow]) -> f64 {
        self.forward_backward(data).loss
    }

    fn forward_backward(&self, data: &[AvWindow]) -> AvForward {
        let n = data.len();
        let fd = self.face_net.input_dim();
        let ad = self.audio_net.input_dim();
        let ew = self.audio_net.output_dim();
        let faces = Array2::from_shape_fn((n, fd), |(i, j)| data[i].face[j]);
        let audio = Array2::from_shape_fn((n, ad), |(i, j)| data[i].audio[j]);
        let (ea_pre, tape_a) = self.audio_net.forward(audio);
        let (ef_pre, tape_f) = self.face_net.forward(faces.clone());
        let ea = self.activate(ea_pre.clone());
        let ef = self.activate(ef_pre.clone());

        let mut joined = Array2::zeros((n, 2 * ew));
        joined.slice_mut(s![.., ..ew]).assign(&ea);
        joined.slice_mut(s![.., ew..]).assign(&ef);
        let (pred, tape_d) = self.decoder.forward(joined);
        let scale = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut d_pred = Array2::zeros((n, fd));
        for i in 0..n {
            for j in 0..fd {
                let r = pred[[i, j]] - faces[[i, j]];
                loss += r.abs() * scale / fd as f64;
                d_pred[[i, j]] = r.signum() * scale / fd as f64;
            }
        }
        let mut d_decoder = vec![0.0; self.decoder.params().len()];
        let d_joined = self.decoder.backward(&tape_d, d_pred, &mut d_decoder);
        let mut d_ea = d_joined.slice(s![.., ..ew]).to_owned();
        let mut d_ef = d_joined.slice(s![.., ew..]).to_owned();

        for (i, w) in data.iter().enumerate() {
            let a = ea.row(i);
            let f = ef.row(i);
            let na = a.dot(&a).sqrt();
            let nf = f.dot(&f).sqrt();
            if na == 0.0 || nf == 0.0 {
                loss += sync_loss(0.0, w.synced) * scale;
                continue;
            }
            let sim = (a.dot(&f) / (na * nf)).clamp(-1.0, 1.0);
            loss += sync_loss(sim, w.synced) * scale;
            let g = sync_loss_grad(sim, w.synced) * scale;
            if g == 0.0 {
                continue;
            }
            let ga = (&f / (na * nf) - &a * (sim / (na * na))) * g;
            let gf = (&a / (na * nf) - &f * (sim / (nf * nf))) * g;
            d_ea.row_mut(i).scaled_add(1.0, &ga);
            d_ef.row_mut(i).scaled_add(1.0, &gf);
        }
        if self.rectify {
            ndarray::Zip::from(&mut d_ea).and(&ea_pre).for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            ndarray::Zip::from(&mut d_ef).and(&ef_pre).for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        AvForward {
            loss,
            d_audio: d_ea,
            d_face: d_ef,
            d_decoder,
            tapes: (tape_a, tape_f),
        }
    }
}

/// Full-batch training on sync plus reconstruction loss.
pub fn train_toy_av_encoder(data: &[AvWindow], config: &AvEncoderConfig) -> Result<AvTraining> {
    let first = data.first().ok_or_else(|| Error::invalid("AV dataset", "empty"))?;
    let (fd, ad) = (first.face.len(), first.audio.len());
    for w in data {
        ensure_len("face window", fd, w.face.len())?;
        ensure_len("audio window", ad, w.audio.len())?;
        if w.face.iter().all(|&v| v == 0.0) || w.audio.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNorm("AV window"));
        }
    }
    if data.iter().all(|w| w.synced) || data.iter().all(|w| !w.synced) {
        return Err(Error::invalid("AV dataset", "needs both synced and unsynced pairs"));
    }
    let mut enc = AvEncoder::new(fd, ad, config)?;
    let lens = [enc.audio_net.params().len(), enc.face_net.params().len(), enc.decoder.params().len()];
    let mut adam = AdamW::new(
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        &lens,
    );
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let fw = enc.forward_backward(data);
        if !fw.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: epoch as u64,
                stage: "av encoder",
            });
        }
        history.push(fw.loss);
        let mut g_audio = vec![0.0; lens[0]];
        let mut g_face = vec![0.0; lens[1]];
        enc.audio_net.backward(&fw.tapes.0, fw.d_audio, &mut g_audio);
        enc.face_net.backward(&fw.tapes.1, fw.d_face, &mut g_face);
        let face_lr = if config.freeze_face { 0.0 } else { config.lr };
        match config.optimizer {
            AvOptimizer::Adam => {
                let rate = |lr| GroupRate { lr, weight_decay: 0.0 };
                let AvEncoder {
                    audio_net,
                    face_net,
                    decoder,
                    ..
                } = &mut enc;
                adam.step(
                    &mut [audio_net.params_mut(), face_net.params_mut(), decoder.params_mut()],
                    &[&g_audio, &g_face, &fw.d_decoder],
                    &[rate(config.lr), rate(face_lr), rate(config.lr)],
                )?;
            }
            AvOptimizer::Gradient => {
                for (p, g) in enc.audio_net.params_mut().iter_mut().zip(&g_audio) {
                    *p -= config.lr * g;
                }
                for (p, g) in enc.face_net.params_mut().iter_mut().zip(&g_face) {
                    *p -= face_lr * g;
                }
                for (p, g) in enc.decoder.params_mut().iter_mut().zip(&fw.d_decoder) {
                    *p -= config.lr * g;
                }
            }
        }
    }
    let final_loss = enc.loss(data);
    Ok(AvTraining {
        encoder: enc,
        history,
        final_loss,
    })
}

/// Windows drawn from `classes` prototypes: synced pairs share a class,
/// unsynced pairs come from different classes. Half of the pairs are synced.
pub fn synthetic_av_dataset(
    pairs: usize,
    classes: usize,
    face_dim: usize,
    audio_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<AvWindow>> {
    if classes < 2 || pairs < 2 || face_dim == 0 || audio_dim == 0 {
        return Err(Error::invalid("AV dataset spec", format!("{pairs} pairs, {classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let jitter = Normal::new(0.0, noise.max(0.0) + 1e-300).expect("finite sigma");
    let face_protos: Vec<Vec<f64>> = (0..classes).map(|_| (0..face_dim).map(|_| unit.sample(&mut rng)).collect()).collect();
    let audio_protos: Vec<Vec<f64>> = (0..classes).map(|_| (0..audio_dim).map(|_| unit.sample(&mut rng)).collect()).collect();
    let mut out = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let c = rng.random_range(0..classes);
        let synced = i % 2 == 0;
        let ac = if synced {
            c
        } else {
            let mut others: Vec<usize> = (0..classes).filter(|&k| k != c).collect();
            others.shuffle(&mut rng);
            others[0]
        };
        let face = face_protos[c].iter().map(|v| v + jitter.sample(&mut rng)).collect();
        let audio = audio_protos[ac].iter().map(|v| v + jitter.sample(&mut rng)).collect();
        out.push(AvWindow { face, audio, synced });
    }
    Ok(out)
}

/// Mean lip feature over a window of `window` frames centered on `frame`,
/// truncated at the sequence ends. A window of 1 returns the frame's row.
pub fn windowed_lip_features(rows: &[Vec<f64>], frame: usize, window: usize) -> Result<Vec<f64>> {
    if window == 0 || frame >= rows.len() {
        return Err(Error::invalid("lip window", format!("frame {frame}, window {window}")));
    }
    let half = (window - 1) / 2;
    let lo = frame.saturating_sub(half);
    let hi = (lo + window).min(rows.len());
    let mut out = vec![0.0; rows[frame].len()];
    for r in &rows[lo..hi] {
        ensure_len("lip feature row", out.len(), r.len())?;
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let n = (hi - lo) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}
