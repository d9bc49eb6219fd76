//! The masked autoencoder: pre-norm ViT encoder over visible tokens, a
//! lighter decoder over the full token grid with a shared learnable mask
//! token, and a per-pixel L2 loss on masked patches only.

use serde::{Deserialize, Serialize};

use crate::masking::MaskPlan;
use crate::patch::{sincos_table, PatchConfig};
use crate::rng::{self, Purpose};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    /// Patch geometry; `patch.embed_dim` is the encoder width.
    pub patch: PatchConfig,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    /// MLP hidden width as a multiple of the block width.
    pub mlp_ratio: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig::toy()
    }
}

impl ViTConfig {
    /// Desk-scale default: 64×64 images, 8×8 patches, 64-wide encoder of depth 4.
    pub fn toy() -> Self {
        ViTConfig {
            patch: PatchConfig::default(),
            enc_depth: 4,
            enc_heads: 4,
            dec_dim: 32,
            dec_depth: 2,
            dec_heads: 4,
            mlp_ratio: 4,
        }
    }

    /// ViT-L encoder on 1280×1280 inputs with 64×64 patches and an 8-block decoder.
    pub fn full_scale() -> Self {
        ViTConfig {
            patch: PatchConfig {
                image_side: 1280,
                patch_side: 64,
                embed_dim: 1024,
            },
            enc_depth: 24,
            enc_heads: 16,
            dec_dim: 512,
            dec_depth: 8,
            dec_heads: 16,
            mlp_ratio: 4,
        }
    }

    pub fn enc_dim(&self) -> usize {
        self.patch.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        let check = |name: &str, dim: usize, heads: usize| {
            if heads == 0 || dim % heads != 0 {
                return Err(Error::config(format!(
                    "{name} width {dim} is not divisible by {heads} heads"
                )));
            }
            if dim % 4 != 0 {
                return Err(Error::config(format!(
                    "{name} width {dim} must be a multiple of 4 for position encodings"
                )));
            }
            Ok(())
        };
        check("encoder", self.enc_dim(), self.enc_heads)?;
        check("decoder", self.dec_dim, self.dec_heads)?;
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        if self.patch.num_tokens() < 2 {
            return Err(Error::config("masking needs at least two patches per image"));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let block = |d: usize| {
            let h = self.mlp_ratio * d;
            4 * d * d + 4 * d + 4 * d + d * h + h + h * d + d
        };
        let (e, dd, pp) = (self.enc_dim(), self.dec_dim, self.patch.patch_len());
        pp * e + e
            + self.enc_depth * block(e)
            + 2 * e
            + e * dd + dd
            + dd
            + self.dec_depth * block(dd)
            + 2 * dd
            + dd * pp + pp
    }
}

/// Role of a parameter, which decides its initialization and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
    MaskToken,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

/// One pre-norm Transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub ln1_g: P,
    pub ln1_b: P,
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
    pub ln2_g: P,
    pub ln2_b: P,
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

const BLOCK_FIELDS: [(&str, ParamKind); 16] = [
    ("ln1_g", ParamKind::NormGain),
    ("ln1_b", ParamKind::NormBias),
    ("wq", ParamKind::Weight),
    ("bq", ParamKind::Bias),
    ("wk", ParamKind::Weight),
    ("bk", ParamKind::Bias),
    ("wv", ParamKind::Weight),
    ("bv", ParamKind::Bias),
    ("wo", ParamKind::Weight),
    ("bo", ParamKind::Bias),
    ("ln2_g", ParamKind::NormGain),
    ("ln2_b", ParamKind::NormBias),
    ("w1", ParamKind::Weight),
    ("b1", ParamKind::Bias),
    ("w2", ParamKind::Weight),
    ("b2", ParamKind::Bias),
];

impl<P> Block<P> {
    fn refs(&self) -> [&P; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn refs_mut(&mut self) -> [&mut P; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = P>) -> Option<Self> {
        Some(Block {
            ln1_g: it.next()?,
            ln1_b: it.next()?,
            wq: it.next()?,
            bq: it.next()?,
            wk: it.next()?,
            bk: it.next()?,
            wv: it.next()?,
            bv: it.next()?,
            wo: it.next()?,
            bo: it.next()?,
            ln2_g: it.next()?,
            ln2_b: it.next()?,
            w1: it.next()?,
            b1: it.next()?,
            w2: it.next()?,
            b2: it.next()?,
        })
    }

    fn shapes(d: usize, hidden: usize) -> Block<Vec<usize>> {
        let (v, m) = (|n: usize| vec![n], |a: usize, b: usize| vec![a, b]);
        Block {
            ln1_g: v(d),
            ln1_b: v(d),
            wq: m(d, d),
            bq: v(d),
            wk: m(d, d),
            bk: v(d),
            wv: m(d, d),
            bv: v(d),
            wo: m(d, d),
            bo: v(d),
            ln2_g: v(d),
            ln2_b: v(d),
            w1: m(d, hidden),
            b1: v(hidden),
            w2: m(hidden, d),
            b2: v(d),
        }
    }
}

/// Every learnable tensor of the model, generic over what is stored per slot
/// (tensors, tape handles, optimizer moments, shapes).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P = Tensor<f32>> {
    pub proj_w: P,
    pub proj_b: P,
    pub enc_blocks: Vec<Block<P>>,
    pub enc_norm_g: P,
    pub enc_norm_b: P,
    pub dec_embed_w: P,
    pub dec_embed_b: P,
    pub mask_token: P,
    pub dec_blocks: Vec<Block<P>>,
    pub dec_norm_g: P,
    pub dec_norm_b: P,
    pub head_w: P,
    pub head_b: P,
}

impl<P> ModelParams<P> {
    /// All slots in canonical order with their names and roles.
    pub fn fields(&self) -> Vec<(String, ParamKind, &P)> {
        use ParamKind::*;
        let mut out = vec![
            ("proj_w".to_string(), Weight, &self.proj_w),
            ("proj_b".to_string(), Bias, &self.proj_b),
        ];
        push_blocks(&mut out, "enc", &self.enc_blocks);
        out.push(("enc_norm_g".into(), NormGain, &self.enc_norm_g));
        out.push(("enc_norm_b".into(), NormBias, &self.enc_norm_b));
        out.push(("dec_embed_w".into(), Weight, &self.dec_embed_w));
        out.push(("dec_embed_b".into(), Bias, &self.dec_embed_b));
        out.push(("mask_token".into(), MaskToken, &self.mask_token));
        push_blocks(&mut out, "dec", &self.dec_blocks);
        out.push(("dec_norm_g".into(), NormGain, &self.dec_norm_g));
        out.push(("dec_norm_b".into(), NormBias, &self.dec_norm_b));
        out.push(("head_w".into(), Weight, &self.head_w));
        out.push(("head_b".into(), Bias, &self.head_b));
        out
    }

    /// Mutable slots in the same order as [`fields`](Self::fields).
    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.proj_w, &mut self.proj_b];
        for b in &mut self.enc_blocks {
            out.extend(b.refs_mut());
        }
        out.extend([
            &mut self.enc_norm_g,
            &mut self.enc_norm_b,
            &mut self.dec_embed_w,
            &mut self.dec_embed_b,
            &mut self.mask_token,
        ]);
        for b in &mut self.dec_blocks {
            out.extend(b.refs_mut());
        }
        out.extend([
            &mut self.dec_norm_g,
            &mut self.dec_norm_b,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn slot_count(&self) -> usize {
        11 + 16 * (self.enc_blocks.len() + self.dec_blocks.len())
    }

    /// Rebuilds a structure from slots in canonical order.
    pub fn from_slots(
        enc_depth: usize,
        dec_depth: usize,
        slots: impl IntoIterator<Item = P>,
    ) -> Result<Self> {
        let mut it = slots.into_iter();
        let short = || Error::contract("too few parameter slots");
        let mut next = || it.next().ok_or_else(short);
        let proj_w = next()?;
        let proj_b = next()?;
        drop(next);
        let enc_blocks = (0..enc_depth)
            .map(|_| Block::from_iter(&mut it).ok_or_else(short))
            .collect::<Result<Vec<_>>>()?;
        let mut next = || it.next().ok_or_else(short);
        let (enc_norm_g, enc_norm_b) = (next()?, next()?);
        let (dec_embed_w, dec_embed_b, mask_token) = (next()?, next()?, next()?);
        drop(next);
        let dec_blocks = (0..dec_depth)
            .map(|_| Block::from_iter(&mut it).ok_or_else(short))
            .collect::<Result<Vec<_>>>()?;
        let mut next = || it.next().ok_or_else(short);
        let out = ModelParams {
            proj_w,
            proj_b,
            enc_blocks,
            enc_norm_g,
            enc_norm_b,
            dec_embed_w,
            dec_embed_b,
            mask_token,
            dec_blocks,
            dec_norm_g: next()?,
            dec_norm_b: next()?,
            head_w: next()?,
            head_b: next()?,
        };
        drop(next);
        if it.next().is_some() {
            return Err(Error::contract("too many parameter slots"));
        }
        Ok(out)
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, ParamKind, &P) -> Q) -> ModelParams<Q> {
        let slots: Vec<Q> = self.fields().into_iter().map(|(n, k, p)| f(&n, k, p)).collect();
        ModelParams::from_slots(self.enc_blocks.len(), self.dec_blocks.len(), slots)
            .expect("slot count is preserved by map")
    }
}

fn push_blocks<'a, P>(out: &mut Vec<(String, ParamKind, &'a P)>, prefix: &str, blocks: &'a [Block<P>]) {
    for (i, b) in blocks.iter().enumerate() {
        for ((name, kind), p) in BLOCK_FIELDS.iter().zip(b.refs()) {
            out.push((format!("{prefix}.{i}.{name}"), *kind, p));
        }
    }
}

/// Shape of every parameter as a pure function of the configuration.
pub fn param_shapes(cfg: &ViTConfig) -> ModelParams<Vec<usize>> {
    let (e, dd, pp) = (cfg.enc_dim(), cfg.dec_dim, cfg.patch.patch_len());
    ModelParams {
        proj_w: vec![pp, e],
        proj_b: vec![e],
        enc_blocks: (0..cfg.enc_depth)
            .map(|_| Block::<Vec<usize>>::shapes(e, cfg.mlp_ratio * e))
            .collect(),
        enc_norm_g: vec![e],
        enc_norm_b: vec![e],
        dec_embed_w: vec![e, dd],
        dec_embed_b: vec![dd],
        mask_token: vec![dd],
        dec_blocks: (0..cfg.dec_depth)
            .map(|_| Block::<Vec<usize>>::shapes(dd, cfg.mlp_ratio * dd))
            .collect(),
        dec_norm_g: vec![dd],
        dec_norm_b: vec![dd],
        head_w: vec![dd, pp],
        head_b: vec![pp],
    }
}

impl<T: Real> ModelParams<Tensor<T>> {
    pub fn numel(&self) -> usize {
        self.fields().iter().map(|(_, _, t)| t.numel()).sum()
    }

    /// Verifies that every tensor has the shape `cfg` prescribes.
    pub fn check_config(&self, cfg: &ViTConfig) -> Result<()> {
        let shapes = param_shapes(cfg);
        if shapes.slot_count() != self.slot_count() {
            return Err(Error::contract(format!(
                "parameters hold {} tensors, config expects {}",
                self.slot_count(),
                shapes.slot_count()
            )));
        }
        for ((name, _, t), (_, _, s)) in self.fields().into_iter().zip(shapes.fields()) {
            if t.shape() != s.as_slice() {
                return Err(Error::contract(format!(
                    "parameter {name} has shape {:?}, config expects {s:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<Tensor<U>> {
        self.map(|_, _, t| t.cast())
    }
}

/// Truncated-normal (σ = 0.02, cut at ±2σ) weights and mask token, zero
/// biases, unit norm gains. Tensors are drawn in canonical slot order from
/// the `Init` stream of `seed`.
pub fn init_params<T: Real>(cfg: &ViTConfig, seed: u64) -> Result<ModelParams<Tensor<T>>> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, Purpose::Init);
    Ok(param_shapes(cfg).map(|_, kind, shape| match kind {
        ParamKind::Weight | ParamKind::MaskToken => Tensor::trunc_normal(shape, INIT_STD, &mut rng),
        ParamKind::Bias | ParamKind::NormBias => Tensor::zeros(shape),
        ParamKind::NormGain => Tensor::ones(shape),
    }))
}

/// Places every parameter on the tape, grad-enabled when `trainable`.
pub fn bind<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ModelParams<Tensor<T>>,
    trainable: bool,
) -> ModelParams<Var> {
    let slots: Vec<Var> = params
        .fields()
        .into_iter()
        .map(|(_, _, t)| {
            if trainable {
                tape.param_ref(t)
            } else {
                tape.constant_ref(t)
            }
        })
        .collect();
    ModelParams::from_slots(params.enc_blocks.len(), params.dec_blocks.len(), slots)
        .expect("slot count is preserved")
}

/// Fixed sine-cosine tables for encoder and decoder tokens.
#[derive(Clone, Debug)]
pub struct PositionTables<T: Real> {
    pub enc: Tensor<T>,
    pub dec: Tensor<T>,
}

impl<T: Real> PositionTables<T> {
    pub fn new(cfg: &ViTConfig) -> Result<Self> {
        let g = cfg.patch.grid_side();
        Ok(PositionTables {
            enc: sincos_table(g, cfg.enc_dim())?,
            dec: sincos_table(g, cfg.dec_dim)?,
        })
    }
}

/// Multi-head scaled dot-product attention: per head `h`,
/// `softmax(q_h k_hᵀ / √c) v_h` with per-head width `c`, heads concatenated.
pub fn attention<T: Real>(tape: &mut Tape<'_, T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = tape.value(q).last_dim();
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("width {d} is not divisible by {heads} heads")));
    }
    let c = d / heads;
    let scale = T::of(1.0 / (c as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_last(q, h * c, c)?,
                tape.slice_last(k, h * c, c)?,
                tape.slice_last(v, h * c, c)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale)?;
        let weights = tape.softmax(logits)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

/// `x += Attn(LN(x)); x += MLP(LN(x))`.
pub fn block_forward<T: Real>(tape: &mut Tape<'_, T>, b: &Block<Var>, x: Var, heads: usize) -> Result<Var> {
    let eps = T::of(LN_EPS);
    let h = tape.layer_norm(x, b.ln1_g, b.ln1_b, eps)?;
    let q = tape.linear(h, b.wq, b.bq)?;
    let k = tape.linear(h, b.wk, b.bk)?;
    let v = tape.linear(h, b.wv, b.bv)?;
    let a = attention(tape, q, k, v, heads)?;
    let o = tape.linear(a, b.wo, b.bo)?;
    let x = tape.add(x, o)?;
    let h = tape.layer_norm(x, b.ln2_g, b.ln2_b, eps)?;
    let m = tape.linear(h, b.w1, b.b1)?;
    let m = tape.gelu(m)?;
    let m = tape.linear(m, b.w2, b.b2)?;
    tape.add(x, m)
}

/// Encoder blocks then the final norm, over tokens that already carry positions.
pub fn encoder_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &ModelParams<Var>,
    cfg: &ViTConfig,
    tokens: Var,
) -> Result<Var> {
    let mut x = tokens;
    for b in &p.enc_blocks {
        x = block_forward(tape, b, x, cfg.enc_heads)?;
    }
    tape.layer_norm(x, p.enc_norm_g, p.enc_norm_b, T::of(LN_EPS))
}

/// Embeds the patches at `tokens`, adds their positions, and encodes them.
pub fn encode_tokens<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &ModelParams<Var>,
    cfg: &ViTConfig,
    patches: Var,
    enc_pos: Var,
    tokens: &[usize],
) -> Result<Var> {
    let rows = tape.gather_rows(patches, tokens)?;
    let x = tape.linear(rows, p.proj_w, p.proj_b)?;
    let pos = tape.gather_rows(enc_pos, tokens)?;
    let x = tape.add(x, pos)?;
    encoder_forward(tape, p, cfg, x)
}

/// Projects latents to decoder width, restores the full token order with the
/// mask token at every masked index, adds decoder positions, decodes, and
/// maps each token to `P²` pixels.
pub fn decoder_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &ModelParams<Var>,
    cfg: &ViTConfig,
    latents: Var,
    plan: &MaskPlan,
    dec_pos: Var,
) -> Result<Var> {
    let m = tape.shape(latents)[0];
    if m != plan.visible().len() {
        return Err(Error::contract(format!(
            "decoder got {m} latents for a plan with {} visible tokens",
            plan.visible().len()
        )));
    }
    let y = tape.linear(latents, p.dec_embed_w, p.dec_embed_b)?;
    let full = if plan.masked().is_empty() {
        y
    } else {
        let token = tape.reshape(p.mask_token, &[1, cfg.dec_dim])?;
        let fill = tape.gather_rows(token, &vec![0; plan.masked().len()])?;
        tape.concat(&[y, fill], 0)?
    };
    let mut x = tape.gather_rows(full, &plan.restore_index())?;
    x = tape.add(x, dec_pos)?;
    for b in &p.dec_blocks {
        x = block_forward(tape, b, x, cfg.dec_heads)?;
    }
    let x = tape.layer_norm(x, p.dec_norm_g, p.dec_norm_b, T::of(LN_EPS))?;
    tape.linear(x, p.head_w, p.head_b)
}

/// `(1/|masked|) Σ_{i∈masked} (1/P²)‖predᵢ − targetᵢ‖²`.
pub fn mae_loss<T: Real>(tape: &mut Tape<'_, T>, pred: Var, target: Var, plan: &MaskPlan) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape("mae_loss", tape.shape(pred), tape.shape(target)));
    }
    if plan.masked().is_empty() {
        return Err(Error::contract("mae_loss needs at least one masked token"));
    }
    let pm = tape.gather_rows(pred, plan.masked())?;
    let tm = tape.gather_rows(target, plan.masked())?;
    let diff = tape.sub(pm, tm)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Output of one full forward pass.
pub struct Forward {
    pub loss: Var,
    pub pred: Var,
}

/// Patches → visible tokens → encoder → decoder → masked L2 loss.
pub fn mae_forward<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    p: &ModelParams<Var>,
    cfg: &ViTConfig,
    pos: &'a PositionTables<T>,
    patches: Tensor<T>,
    plan: &MaskPlan,
) -> Result<Forward> {
    if plan.n_tokens() != cfg.patch.num_tokens() {
        return Err(Error::contract(format!(
            "plan covers {} tokens, model has {}",
            plan.n_tokens(),
            cfg.patch.num_tokens()
        )));
    }
    let patches = tape.constant(patches);
    let enc_pos = tape.constant_ref(&pos.enc);
    let dec_pos = tape.constant_ref(&pos.dec);
    let latents = encode_tokens(tape, p, cfg, patches, enc_pos, plan.visible())?;
    let pred = decoder_forward(tape, p, cfg, latents, plan, dec_pos)?;
    let loss = mae_loss(tape, pred, patches, plan)?;
    Ok(Forward { loss, pred })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{random_mask, MaskPlan};
    use crate::rng;

    fn tiny() -> ViTConfig {
        ViTConfig {
            patch: PatchConfig {
                image_side: 8,
                patch_side: 2,
                embed_dim: 8,
            },
            enc_depth: 1,
            enc_heads: 2,
            dec_dim: 4,
            dec_depth: 1,
            dec_heads: 1,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn param_count_matches_hand_sum() {
        // P²=4, E=8, Dd=4, hidden 16 / 8.
        let enc_block = 4 * 64 + 4 * 8 + 4 * 8 + 8 * 16 + 16 + 16 * 8 + 8; // 600
        let dec_block = 4 * 16 + 4 * 4 + 4 * 4 + 4 * 8 + 8 + 8 * 4 + 4; // 172
        let hand = (4 * 8 + 8) + enc_block + 16 + (8 * 4 + 4) + 4 + dec_block + 8 + (4 * 4 + 4);
        assert_eq!(hand, 40 + 600 + 16 + 36 + 4 + 172 + 8 + 20);
        let cfg = tiny();
        assert_eq!(cfg.param_count(), hand);
        let p = init_params::<f32>(&cfg, 0).unwrap();
        assert_eq!(p.numel(), hand);
        let toy = ViTConfig::toy();
        assert_eq!(init_params::<f32>(&toy, 0).unwrap().numel(), toy.param_count());
    }

    #[test]
    fn init_is_deterministic_and_follows_scheme() {
        let cfg = tiny();
        let a = init_params::<f32>(&cfg, 3).unwrap();
        assert_eq!(a, init_params::<f32>(&cfg, 3).unwrap());
        assert_ne!(a, init_params::<f32>(&cfg, 4).unwrap());
        for (name, kind, t) in a.fields() {
            match kind {
                ParamKind::Bias | ParamKind::NormBias => {
                    assert!(t.data().iter().all(|&v| v == 0.0), "{name}")
                }
                ParamKind::NormGain => assert!(t.data().iter().all(|&v| v == 1.0), "{name}"),
                _ => assert!(t.data().iter().all(|&v| v.abs() <= 0.04 && v != 0.0), "{name}"),
            }
        }
    }

    #[test]
    fn slots_round_trip_and_names_are_unique() {
        let p = init_params::<f32>(&tiny(), 1).unwrap();
        let names: std::collections::HashSet<_> = p.fields().into_iter().map(|f| f.0).collect();
        assert_eq!(names.len(), p.slot_count());
        let back = ModelParams::from_slots(1, 1, p.fields().into_iter().map(|f| f.2.clone())).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn full_scale_config_is_legal() {
        let cfg = ViTConfig::full_scale();
        cfg.validate().unwrap();
        assert_eq!(cfg.patch.num_tokens(), 400);
        let shapes = param_shapes(&cfg);
        let total: usize = shapes.fields().iter().map(|(_, _, s)| s.iter().product::<usize>()).sum();
        assert_eq!(total, cfg.param_count());
    }

    #[test]
    fn invalid_heads_rejected() {
        let mut cfg = tiny();
        cfg.enc_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn single_token_attention_returns_v() {
        let mut tape = Tape::<f64>::no_grad();
        let q = tape.constant(Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.1]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 1.0, -1.0, 0.5]).unwrap());
        let v = tape.constant(Tensor::new(vec![1, 4], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let out = attention(&mut tape, q, k, v, 2).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut r = rng::from_seed(2);
        let mut tape = Tape::<f64>::no_grad();
        let q = tape.constant(Tensor::gaussian(&[3, 4], 0.0, 1.0, &mut r));
        let krow = [0.2, -0.4, 1.0, 0.7];
        let k = tape.constant(Tensor::from_fn(&[3, 4], |i| krow[i % 4]));
        let vt = Tensor::gaussian(&[3, 4], 0.0, 1.0, &mut r);
        let v = tape.constant(vt.clone());
        let out = attention(&mut tape, q, k, v, 2).unwrap();
        for c in 0..4 {
            let mean = (0..3).map(|r| vt.at2(r, c)).sum::<f64>() / 3.0;
            for r in 0..3 {
                assert!((tape.value(out).at2(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut r = rng::from_seed(4);
        let (q, k, v) = (
            Tensor::<f64>::gaussian(&[5, 8], 0.0, 1.0, &mut r),
            Tensor::<f64>::gaussian(&[5, 8], 0.0, 1.0, &mut r),
            Tensor::<f64>::gaussian(&[5, 8], 0.0, 1.0, &mut r),
        );
        let perm = [3, 0, 4, 1, 2];
        let run = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, permute: bool| {
            let mut tape = Tape::<f64>::no_grad();
            let mut put = |t: &Tensor<f64>| {
                let x = tape.constant(t.clone());
                if permute {
                    tape.gather_rows(x, &perm).unwrap()
                } else {
                    x
                }
            };
            let (qv, kv, vv) = (put(q), put(k), put(v));
            let o = attention(&mut tape, qv, kv, vv, 2).unwrap();
            tape.value(o).clone()
        };
        let plain = run(&q, &k, &v, false);
        let permuted = run(&q, &k, &v, true);
        for (i, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((permuted.at2(i, c) - plain.at2(src, c)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_depth_encoder_is_final_norm() {
        let mut cfg = tiny();
        cfg.enc_depth = 0;
        let p = init_params::<f64>(&cfg, 0).unwrap();
        let mut tape = Tape::<f64>::no_grad();
        let vars = bind(&mut tape, &p, false);
        let x = tape.constant(Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.37).sin()));
        let y = encoder_forward(&mut tape, &vars, &cfg, x).unwrap();
        let ln = tape.layer_norm(x, vars.enc_norm_g, vars.enc_norm_b, LN_EPS).unwrap();
        assert_eq!(tape.value(y), tape.value(ln));
        for m in [1, 2, 7] {
            let x = tape.constant(Tensor::zeros(&[m, 8]));
            let y = encoder_forward(&mut tape, &vars, &cfg, x).unwrap();
            assert_eq!(tape.shape(y), &[m, 8]);
        }
    }

    fn decode(cfg: &ViTConfig, p: &ModelParams<Tensor<f64>>, latents: &Tensor<f64>, plan: &MaskPlan) -> Tensor<f64> {
        let pos = PositionTables::<f64>::new(cfg).unwrap();
        let mut tape = Tape::<f64>::no_grad();
        let vars = bind(&mut tape, p, false);
        let l = tape.constant(latents.clone());
        let dp = tape.constant(pos.dec.clone());
        let out = decoder_forward(&mut tape, &vars, cfg, l, plan, dp).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn decoder_without_masks_ignores_mask_token() {
        let cfg = tiny();
        let n = cfg.patch.num_tokens();
        let plan = MaskPlan::with_masked(n, vec![]).unwrap();
        let latents = Tensor::<f64>::gaussian(&[n, 8], 0.0, 1.0, &mut rng::from_seed(1));
        let p = init_params::<f64>(&cfg, 5).unwrap();
        let mut q = p.clone();
        q.mask_token = Tensor::full(&[cfg.dec_dim], 9.0);
        assert_eq!(decode(&cfg, &p, &latents, &plan), decode(&cfg, &q, &latents, &plan));
    }

    #[test]
    fn decoder_checks_latent_count() {
        let cfg = tiny();
        let plan = random_mask(cfg.patch.num_tokens(), 0.75, &mut rng::from_seed(0)).unwrap();
        let p = init_params::<f64>(&cfg, 0).unwrap();
        let pos = PositionTables::<f64>::new(&cfg).unwrap();
        let mut tape = Tape::<f64>::no_grad();
        let vars = bind(&mut tape, &p, false);
        let l = tape.constant(Tensor::zeros(&[plan.visible().len() + 1, 8]));
        let dp = tape.constant(pos.dec);
        assert!(matches!(
            decoder_forward(&mut tape, &vars, &cfg, l, &plan, dp),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn masked_positions_differ_only_by_position() {
        // With zero decoder blocks and zero positions, every masked row is identical.
        let mut cfg = tiny();
        cfg.dec_depth = 0;
        let n = cfg.patch.num_tokens();
        let p = init_params::<f64>(&cfg, 2).unwrap();
        let plan = MaskPlan::with_masked(n, vec![1, 5, 9]).unwrap();
        let mut tape = Tape::<f64>::no_grad();
        let vars = bind(&mut tape, &p, false);
        let l = tape.constant(Tensor::gaussian(&[n - 3, 8], 0.0, 1.0, &mut rng::from_seed(3)));
        let zero_pos = tape.constant(Tensor::zeros(&[n, cfg.dec_dim]));
        let out = decoder_forward(&mut tape, &vars, &cfg, l, &plan, zero_pos).unwrap();
        let out = tape.value(out);
        assert_eq!(out.row(1), out.row(5));
        assert_eq!(out.row(5), out.row(9));
        let pos = PositionTables::<f64>::new(&cfg).unwrap();
        let real_pos = tape.constant(pos.dec);
        let out = decoder_forward(&mut tape, &vars, &cfg, l, &plan, real_pos).unwrap();
        assert_ne!(tape.value(out).row(1), tape.value(out).row(5));
    }

    #[test]
    fn loss_values() {
        let plan = MaskPlan::with_masked(3, vec![1]).unwrap();
        let mut tape = Tape::<f64>::no_grad();
        let pred = tape.constant(Tensor::full(&[3, 4], 0.5));
        let target = tape.constant(Tensor::zeros(&[3, 4]));
        let l = mae_loss(&mut tape, pred, target, &plan).unwrap();
        assert_eq!(tape.value(l).item(), 0.25);
        let same = mae_loss(&mut tape, pred, pred, &plan).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        let none = MaskPlan::with_masked(3, vec![]).unwrap();
        assert!(matches!(mae_loss(&mut tape, pred, target, &none), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_ignores_visible_targets() {
        let mut r = rng::from_seed(9);
        let plan = MaskPlan::with_masked(6, vec![0, 4]).unwrap();
        let pred = Tensor::<f32>::uniform(&[6, 4], 0.0, 1.0, &mut r);
        let target = Tensor::<f32>::uniform(&[6, 4], 0.0, 1.0, &mut r);
        let mut perturbed = target.clone();
        for &v in plan.visible() {
            for c in 0..4 {
                perturbed.data_mut()[v * 4 + c] += 3.0;
            }
        }
        let eval = |t: &Tensor<f32>| {
            let mut tape = Tape::<f32>::no_grad();
            let p = tape.constant(pred.clone());
            let t = tape.constant(t.clone());
            let l = mae_loss(&mut tape, p, t, &plan).unwrap();
            tape.value(l).item().to_bits()
        };
        assert_eq!(eval(&target), eval(&perturbed));
    }
}
