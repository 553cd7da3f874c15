//! Plain vision transformer: patch embedding, a stack of pre-norm
//! attention/MLP blocks, and a classification head reading either a class
//! token or the global average of patch outputs.
//!
//! One taped implementation carries every forward path; the value-level
//! methods wrap it with gradients disabled. Prompt attachment is delegated
//! to [`crate::prompt`].

use crate::error::{Result, SptError};
use crate::prompt::{self, ForwardTrace, PromptSet, StagedPrompts, TokenOrder};
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Classification read-out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Dedicated class token; the head reads its final embedding.
    ClsToken,
    /// No class token anywhere; the head reads the mean of the final patch
    /// embeddings.
    Gap,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub head_mode: HeadMode,
}

impl VitConfig {
    /// Workstation-sized default: trains in minutes, deep enough for
    /// per-layer ablations.
    pub fn desk(num_classes: usize) -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            num_classes,
            head_mode: HeadMode::ClsToken,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(SptError::config(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(SptError::config(format!(
                "heads {} must divide embed dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.depth == 0 || self.num_classes == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(SptError::config("depth, classes, channels, mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// Patch tokens per image.
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Flattened patch length.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    /// Total parameter count — a pure function of the configuration.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let block = 2 * d                  // ln1
            + 4 * (d * d + d)              // q, k, v, out projections
            + 2 * d                        // ln2
            + d * self.hidden_dim() + self.hidden_dim()
            + self.hidden_dim() * d + d;
        let cls = match self.head_mode {
            HeadMode::ClsToken => d,
            HeadMode::Gap => 0,
        };
        self.patch_dim() * d
            + (self.num_patches() + 1) * d // positional table, slot 0 reserved for CLS
            + cls
            + self.depth * block
            + d * self.num_classes
            + self.num_classes
    }
}

/// One transformer block's parameters.
#[derive(Debug, Clone)]
pub struct BlockParams<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

/// Backbone + head parameter set.
#[derive(Debug, Clone)]
pub struct VitModel<T> {
    pub config: VitConfig,
    /// `[patch_dim, D]`, no bias: the positional table provides the shift.
    pub patch_proj: Tensor<T>,
    /// `[(N_e + 1), D]`; row 0 belongs to the CLS slot and is unused in
    /// gap mode.
    pub pos_embed: Tensor<T>,
    pub cls_token: Option<Tensor<T>>,
    pub blocks: Vec<BlockParams<T>>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    frozen: bool,
}

fn xavier<T: Scalar>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let fan_in = shape[0] as f64;
    let fan_out = shape[1] as f64;
    let std = (2.0 / (fan_in + fan_out)).sqrt();
    Tensor::randn(shape, std, rng).with_requires_grad(true)
}

impl<T: Scalar> VitModel<T> {
    /// Fresh model: Xavier-normal projections, unit/zero layer norms,
    /// zero-initialized head (an untrained model predicts uniformly).
    pub fn init(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let on = |t: Tensor<T>| t.with_requires_grad(true);

        let patch_proj = xavier(vec![config.patch_dim(), d], &mut rng);
        let pos_embed = on(Tensor::randn(vec![config.num_patches() + 1, d], 0.02, &mut rng));
        let cls_token = match config.head_mode {
            HeadMode::ClsToken => Some(on(Tensor::randn(vec![d], 0.02, &mut rng))),
            HeadMode::Gap => None,
        };
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ln1_gamma: on(Tensor::full(vec![d], T::one())),
                ln1_beta: on(Tensor::zeros(vec![d])),
                wq: xavier(vec![d, d], &mut rng),
                bq: on(Tensor::zeros(vec![d])),
                wk: xavier(vec![d, d], &mut rng),
                bk: on(Tensor::zeros(vec![d])),
                wv: xavier(vec![d, d], &mut rng),
                bv: on(Tensor::zeros(vec![d])),
                wo: xavier(vec![d, d], &mut rng),
                bo: on(Tensor::zeros(vec![d])),
                ln2_gamma: on(Tensor::full(vec![d], T::one())),
                ln2_beta: on(Tensor::zeros(vec![d])),
                fc1_w: xavier(vec![d, config.hidden_dim()], &mut rng),
                fc1_b: on(Tensor::zeros(vec![config.hidden_dim()])),
                fc2_w: xavier(vec![config.hidden_dim(), d], &mut rng),
                fc2_b: on(Tensor::zeros(vec![d])),
            })
            .collect();
        let head_w = on(Tensor::zeros(vec![d, config.num_classes]));
        let head_b = on(Tensor::zeros(vec![config.num_classes]));

        Ok(VitModel {
            config,
            patch_proj,
            pos_embed,
            cls_token,
            blocks,
            head_w,
            head_b,
            frozen: false,
        })
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Freezes (or unfreezes) the backbone. The head stays trainable in
    /// both states.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        let trainable = !frozen;
        for (name, t) in self.named_params_mut() {
            if name.starts_with("head.") {
                t.set_requires_grad(true);
            } else {
                t.set_requires_grad(trainable);
            }
        }
    }

    /// Canonical parameter enumeration; staging and checkpoint formats
    /// follow this order and naming.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.push(("patch_proj".into(), &self.patch_proj));
        out.push(("pos_embed".into(), &self.pos_embed));
        if let Some(cls) = &self.cls_token {
            out.push(("cls_token".into(), cls));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in block_fields(b) {
                out.push((format!("block{i}.{suffix}"), t));
            }
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.push(("patch_proj".into(), &mut self.patch_proj));
        out.push(("pos_embed".into(), &mut self.pos_embed));
        if let Some(cls) = &mut self.cls_token {
            out.push(("cls_token".into(), cls));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (suffix, t) in block_fields_mut(b) {
                out.push((format!("block{i}.{suffix}"), t));
            }
        }
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over every backbone (non-head) parameter's bit pattern.
    pub fn backbone_digest(&self) -> [u8; 32] {
        digest_named(
            self.named_params()
                .into_iter()
                .filter(|(n, _)| !n.starts_with("head.")),
        )
    }

    /// Extracts non-overlapping patches: `[B, C, H, W] -> [B, N_e,
    /// C·ph·pw]`, patch grid row-major, channel-major within a patch.
    pub fn extract_patches(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size
        {
            return Err(SptError::config(format!(
                "images {s:?} do not match config {}x{}x{}",
                cfg.channels, cfg.image_size, cfg.image_size
            )));
        }
        let (b, c, hw) = (s[0], s[1], s[2]);
        let p = cfg.patch_size;
        let g = hw / p;
        let pd = cfg.patch_dim();
        let ne = cfg.num_patches();
        let data = images.data();
        let mut out = vec![T::zero(); b * ne * pd];
        for bi in 0..b {
            for gy in 0..g {
                for gx in 0..g {
                    let patch = gy * g + gx;
                    let dst = (bi * ne + patch) * pd;
                    let mut k = 0;
                    for ch in 0..c {
                        for py in 0..p {
                            let y = gy * p + py;
                            let src = ((bi * c + ch) * hw + y) * hw + gx * p;
                            out[dst + k..dst + k + p].copy_from_slice(&data[src..src + p]);
                            k += p;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(vec![b, ne, pd], out)
    }

    // ---- value-level wrappers over the taped forward ---------------------

    /// Patch embedding of a single `[C, H, W]` image: flattened patches
    /// projected to width D plus the positional table's patch rows.
    pub fn patch_embed(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let batched = image.reshaped(prepend_batch(image.shape()))?;
        let mut tape = Tape::new();
        let vit = TapedVit::stage(&mut tape, self, false);
        let tokens = vit.embed_patches(&mut tape, &batched)?;
        let shape = tape.shape(tokens)[1..].to_vec();
        tape.value(tokens).reshaped(shape)
    }

    /// Runs block `block_index` (0-based) on a `[T, D]` token matrix.
    pub fn block_forward(&self, tokens: &Tensor<T>, block_index: usize) -> Result<Tensor<T>> {
        if block_index >= self.config.depth {
            return Err(SptError::config(format!(
                "block index {block_index} out of range for depth {}",
                self.config.depth
            )));
        }
        let batched = tokens.reshaped(prepend_batch(tokens.shape()))?;
        let mut tape = Tape::new();
        let vit = TapedVit::stage(&mut tape, self, false);
        let tid = tape.constant(batched);
        let out = vit.block(&mut tape, tid, block_index)?;
        let shape = tape.shape(out)[1..].to_vec();
        tape.value(out).reshaped(shape)
    }

    /// Class logits for one `[C, H, W]` image.
    pub fn forward_logits(
        &self,
        image: &Tensor<T>,
        prompts: Option<&PromptSet<T>>,
    ) -> Result<Tensor<T>> {
        let batched = image.reshaped(prepend_batch(image.shape()))?;
        let logits = self.forward_logits_batch(&batched, prompts, TokenOrder::ClsPromptPatch)?;
        logits.reshaped(vec![self.config.num_classes])
    }

    /// Class logits for a `[B, C, H, W]` batch.
    pub fn forward_logits_batch(
        &self,
        images: &Tensor<T>,
        prompts: Option<&PromptSet<T>>,
        order: TokenOrder,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = forward_on_tape(&mut tape, self, images, prompts, order, false, false)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Forward pass that also captures per-layer token matrices for
    /// harvesting and diagnostics.
    pub fn forward_traced(
        &self,
        images: &Tensor<T>,
        prompts: Option<&PromptSet<T>>,
        order: TokenOrder,
    ) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let mut tape = Tape::new();
        let out = forward_on_tape(&mut tape, self, images, prompts, order, false, true)?;
        Ok((
            tape.value(out.logits).clone(),
            out.trace.expect("trace requested"),
        ))
    }
}

fn prepend_batch(shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(1);
    s.extend_from_slice(shape);
    s
}

fn block_fields<'a, T>(b: &'a BlockParams<T>) -> Vec<(&'static str, &'a Tensor<T>)> {
    vec![
        ("ln1.gamma", &b.ln1_gamma),
        ("ln1.beta", &b.ln1_beta),
        ("attn.wq", &b.wq),
        ("attn.bq", &b.bq),
        ("attn.wk", &b.wk),
        ("attn.bk", &b.bk),
        ("attn.wv", &b.wv),
        ("attn.bv", &b.bv),
        ("attn.wo", &b.wo),
        ("attn.bo", &b.bo),
        ("ln2.gamma", &b.ln2_gamma),
        ("ln2.beta", &b.ln2_beta),
        ("mlp.w1", &b.fc1_w),
        ("mlp.b1", &b.fc1_b),
        ("mlp.w2", &b.fc2_w),
        ("mlp.b2", &b.fc2_b),
    ]
}

fn block_fields_mut<'a, T>(b: &'a mut BlockParams<T>) -> Vec<(&'static str, &'a mut Tensor<T>)> {
    vec![
        ("ln1.gamma", &mut b.ln1_gamma),
        ("ln1.beta", &mut b.ln1_beta),
        ("attn.wq", &mut b.wq),
        ("attn.bq", &mut b.bq),
        ("attn.wk", &mut b.wk),
        ("attn.bk", &mut b.bk),
        ("attn.wv", &mut b.wv),
        ("attn.bv", &mut b.bv),
        ("attn.wo", &mut b.wo),
        ("attn.bo", &mut b.bo),
        ("ln2.gamma", &mut b.ln2_gamma),
        ("ln2.beta", &mut b.ln2_beta),
        ("mlp.w1", &mut b.fc1_w),
        ("mlp.b1", &mut b.fc1_b),
        ("mlp.w2", &mut b.fc2_w),
        ("mlp.b2", &mut b.fc2_b),
    ]
}

/// SHA-256 over named tensors (name, shape, little-endian payload).
pub fn digest_named<'a, T: Scalar>(
    params: impl Iterator<Item = (String, &'a Tensor<T>)>,
) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for (name, t) in params {
        hasher.update(name.as_bytes());
        for &d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(t.len() * T::BYTES);
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        hasher.update(&buf);
    }
    hasher.finalize().into()
}

// ---- staged (on-tape) model ------------------------------------------------

struct StagedBlock {
    ln1_gamma: TensorId,
    ln1_beta: TensorId,
    wq: TensorId,
    bq: TensorId,
    wk: TensorId,
    bk: TensorId,
    wv: TensorId,
    bv: TensorId,
    wo: TensorId,
    bo: TensorId,
    ln2_gamma: TensorId,
    ln2_beta: TensorId,
    fc1_w: TensorId,
    fc1_b: TensorId,
    fc2_w: TensorId,
    fc2_b: TensorId,
}

/// Model parameters registered on a tape, with name→id bindings for
/// routing gradients back to the owning tensors.
pub struct TapedVit {
    pub config: VitConfig,
    patch_proj: TensorId,
    pos_embed: TensorId,
    cls_token: Option<TensorId>,
    blocks: Vec<StagedBlock>,
    head_w: TensorId,
    head_b: TensorId,
    pub bindings: Vec<(String, TensorId)>,
}

impl TapedVit {
    /// Copies the model's parameters onto the tape. With `use_grads`
    /// false every parameter is staged as a constant (pure inference).
    pub fn stage<T: Scalar>(tape: &mut Tape<T>, model: &VitModel<T>, use_grads: bool) -> TapedVit {
        let mut bindings = Vec::new();
        let mut put = |tape: &mut Tape<T>, name: String, t: &Tensor<T>| -> TensorId {
            let id = if use_grads {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            bindings.push((name, id));
            id
        };

        let patch_proj = put(tape, "patch_proj".into(), &model.patch_proj);
        let pos_embed = put(tape, "pos_embed".into(), &model.pos_embed);
        let cls_token = model
            .cls_token
            .as_ref()
            .map(|t| put(tape, "cls_token".into(), t));
        let blocks = model
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| StagedBlock {
                ln1_gamma: put(tape, format!("block{i}.ln1.gamma"), &b.ln1_gamma),
                ln1_beta: put(tape, format!("block{i}.ln1.beta"), &b.ln1_beta),
                wq: put(tape, format!("block{i}.attn.wq"), &b.wq),
                bq: put(tape, format!("block{i}.attn.bq"), &b.bq),
                wk: put(tape, format!("block{i}.attn.wk"), &b.wk),
                bk: put(tape, format!("block{i}.attn.bk"), &b.bk),
                wv: put(tape, format!("block{i}.attn.wv"), &b.wv),
                bv: put(tape, format!("block{i}.attn.bv"), &b.bv),
                wo: put(tape, format!("block{i}.attn.wo"), &b.wo),
                bo: put(tape, format!("block{i}.attn.bo"), &b.bo),
                ln2_gamma: put(tape, format!("block{i}.ln2.gamma"), &b.ln2_gamma),
                ln2_beta: put(tape, format!("block{i}.ln2.beta"), &b.ln2_beta),
                fc1_w: put(tape, format!("block{i}.mlp.w1"), &b.fc1_w),
                fc1_b: put(tape, format!("block{i}.mlp.b1"), &b.fc1_b),
                fc2_w: put(tape, format!("block{i}.mlp.w2"), &b.fc2_w),
                fc2_b: put(tape, format!("block{i}.mlp.b2"), &b.fc2_b),
            })
            .collect();
        let head_w = put(tape, "head.w".into(), &model.head_w);
        let head_b = put(tape, "head.b".into(), &model.head_b);

        TapedVit {
            config: model.config.clone(),
            patch_proj,
            pos_embed,
            cls_token,
            blocks,
            head_w,
            head_b,
            bindings,
        }
    }

    /// Patch tokens with positional rows added: `E_0`, shape `[B, N_e, D]`.
    pub fn embed_patches<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
    ) -> Result<TensorId> {
        // extract_patches needs the owning model only for the config; a
        // throwaway borrow keeps the logic in one place.
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size
        {
            return Err(SptError::config(format!(
                "images {s:?} do not match config {}x{}x{}",
                cfg.channels, cfg.image_size, cfg.image_size
            )));
        }
        let b = s[0];
        let ne = cfg.num_patches();
        let pd = cfg.patch_dim();
        let d = cfg.embed_dim;

        let patches = extract_patches_value(images, cfg)?;
        let pid = tape.constant(patches);
        let flat = tape.reshape(pid, vec![b * ne, pd])?;
        let proj = tape.matmul(flat, self.patch_proj)?;
        let tokens = tape.reshape(proj, vec![b, ne, d])?;

        let pos3 = tape.reshape(self.pos_embed, vec![1, ne + 1, d])?;
        let pos_patch = tape.slice_axis1(pos3, 1, ne)?;
        let pos_flat = tape.reshape(pos_patch, vec![ne, d])?;
        let pos_rep = tape.repeat_rows(pos_flat, b)?;
        tape.add(tokens, pos_rep)
    }

    /// CLS tokens (with positional row 0) tiled over the batch: `[B, 1, D]`.
    pub fn cls_tokens<T: Scalar>(&self, tape: &mut Tape<T>, batch: usize) -> Result<Option<TensorId>> {
        let Some(cls) = self.cls_token else {
            return Ok(None);
        };
        let d = self.config.embed_dim;
        let ne = self.config.num_patches();
        let cls2 = tape.reshape(cls, vec![1, d])?;
        let pos3 = tape.reshape(self.pos_embed, vec![1, ne + 1, d])?;
        let pos_cls = tape.slice_axis1(pos3, 0, 1)?;
        let pos_cls2 = tape.reshape(pos_cls, vec![1, d])?;
        let seeded = tape.add(cls2, pos_cls2)?;
        Ok(Some(tape.repeat_rows(seeded, batch)?))
    }

    /// Pre-norm block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
    pub fn block<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        tokens: TensorId,
        index: usize,
    ) -> Result<TensorId> {
        let blk = &self.blocks[index];
        let s = tape.shape(tokens).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let heads = self.config.heads;
        let dh = self.config.head_dim();

        let ln1 = tape.layer_norm(tokens, blk.ln1_gamma, blk.ln1_beta, T::from_f64(LN_EPS))?;
        let flat = tape.reshape(ln1, vec![b * t, d])?;

        let mut proj = |tape: &mut Tape<T>, w, bias| -> Result<TensorId> {
            let h = tape.matmul(flat, w)?;
            let h = tape.add_bias(h, bias)?;
            let h3 = tape.reshape(h, vec![b, t, d])?;
            tape.split_heads(h3, heads)
        };
        let q = proj(tape, blk.wq, blk.bq)?;
        let k = proj(tape, blk.wk, blk.bk)?;
        let v = proj(tape, blk.wv, blk.bv)?;

        let scores = tape.bmm_nt(q, k)?;
        let scaled = tape.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
        let probs = tape.softmax(scaled, 2)?;
        let ctx = tape.bmm(probs, v)?;
        let merged = tape.merge_heads(ctx, heads)?;
        let mflat = tape.reshape(merged, vec![b * t, d])?;
        let out = tape.matmul(mflat, blk.wo)?;
        let out = tape.add_bias(out, blk.bo)?;
        let out3 = tape.reshape(out, vec![b, t, d])?;
        let x1 = tape.add(tokens, out3)?;

        let ln2 = tape.layer_norm(x1, blk.ln2_gamma, blk.ln2_beta, T::from_f64(LN_EPS))?;
        let ln2f = tape.reshape(ln2, vec![b * t, d])?;
        let h1 = tape.matmul(ln2f, blk.fc1_w)?;
        let h1 = tape.add_bias(h1, blk.fc1_b)?;
        let act = tape.gelu(h1);
        let h2 = tape.matmul(act, blk.fc2_w)?;
        let h2 = tape.add_bias(h2, blk.fc2_b)?;
        let mlp3 = tape.reshape(h2, vec![b, t, d])?;
        tape.add(x1, mlp3)
    }

    /// Head on the pooled `[B, D]` representation.
    pub fn head<T: Scalar>(&self, tape: &mut Tape<T>, pooled: TensorId) -> Result<TensorId> {
        let logits = tape.matmul(pooled, self.head_w)?;
        tape.add_bias(logits, self.head_b)
    }
}

/// Layer-norm epsilon (standard transformer default).
pub const LN_EPS: f64 = 1e-6;

fn extract_patches_value<T: Scalar>(images: &Tensor<T>, cfg: &VitConfig) -> Result<Tensor<T>> {
    // Shares the model method's layout; routed through a free function so
    // staged forwards don't need the full model.
    let s = images.shape();
    let (b, c, hw) = (s[0], s[1], s[2]);
    let p = cfg.patch_size;
    let g = hw / p;
    let pd = cfg.patch_dim();
    let ne = cfg.num_patches();
    let data = images.data();
    let mut out = vec![T::zero(); b * ne * pd];
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                let patch = gy * g + gx;
                let dst = (bi * ne + patch) * pd;
                let mut kk = 0;
                for ch in 0..c {
                    for py in 0..p {
                        let y = gy * p + py;
                        let src = ((bi * c + ch) * hw + y) * hw + gx * p;
                        out[dst + kk..dst + kk + p].copy_from_slice(&data[src..src + p]);
                        kk += p;
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![b, ne, pd], out)
}

/// Full forward output on a tape.
pub struct ForwardOutput<T> {
    pub logits: TensorId,
    pub vit_bindings: Vec<(String, TensorId)>,
    pub prompt_bindings: Vec<(String, TensorId)>,
    pub trace: Option<ForwardTrace<T>>,
}

/// The single forward implementation: Eq.-style pipeline of patch
/// embedding, optional prompt attachment, `L` blocks, head.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &VitModel<T>,
    images: &Tensor<T>,
    prompts: Option<&PromptSet<T>>,
    order: TokenOrder,
    use_grads: bool,
    want_trace: bool,
) -> Result<ForwardOutput<T>> {
    if let Some(p) = prompts {
        p.validate_for(&model.config)?;
    }
    let vit = TapedVit::stage(tape, model, use_grads);
    let batch = images.shape()[0];

    let patches = vit.embed_patches(tape, images)?;
    let cls = vit.cls_tokens(tape, batch)?;

    let staged_prompts: Option<StagedPrompts> =
        prompts.map(|p| prompt::stage_prompts(tape, p, use_grads));

    let mut trace = want_trace.then(ForwardTrace::default);
    let ends = prompt::run_blocks(
        tape,
        &vit,
        cls,
        patches,
        staged_prompts.as_ref(),
        order,
        trace.as_mut(),
    )?;

    let d = model.config.embed_dim;
    let pooled = match model.config.head_mode {
        HeadMode::ClsToken => {
            let x = ends
                .cls_final
                .ok_or_else(|| SptError::config("cls head without cls token"))?;
            tape.reshape(x, vec![batch, d])?
        }
        HeadMode::Gap => tape.mean_axis1(ends.patch_final)?,
    };
    let logits = vit.head(tape, pooled)?;

    Ok(ForwardOutput {
        logits,
        vit_bindings: vit.bindings,
        prompt_bindings: staged_prompts.map(|s| s.bindings).unwrap_or_default(),
        trace,
    })
}
