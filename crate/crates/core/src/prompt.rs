//! Prompt attachment: concatenate learnable prompt tokens onto the token
//! sequence, propagate them through the blocks (shallow) or re-insert
//! fresh ones per block while discarding their outputs (deep), and strip
//! them before the head.
//!
//! Shallow and deep prompting differ only in where tokens are inserted;
//! the self-prompt variants differ from the random-init ones only in how
//! the tokens are initialized, which lives in [`crate::prompt_init`].

use crate::error::{Result, SptError};
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::vit::{digest_named, TapedVit, VitConfig, VitModel};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Prompts inserted before block 1 only; their evolved embeddings ride
    /// through the remaining blocks.
    Shallow,
    /// Fresh prompts inserted before every block; per-block prompt outputs
    /// are discarded.
    Deep,
}

/// Position of the prompt rows relative to the CLS slot. The two orderings
/// are mathematically equivalent because prompts carry no positional
/// embedding; the non-default one exists to assert exactly that.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenOrder {
    ClsPromptPatch,
    PromptClsPatch,
}

/// Learnable prompt tokens, one tensor per insertion point.
#[derive(Debug, Clone)]
pub struct PromptSet<T> {
    mode: PromptMode,
    /// Shallow: exactly one `[N_p, D]` tensor. Deep: one per block, all of
    /// identical shape (equal prompt length per layer).
    tokens: Vec<Tensor<T>>,
    frozen: bool,
}

impl<T: Scalar> PromptSet<T> {
    pub fn new(mode: PromptMode, tokens: Vec<Tensor<T>>) -> Result<Self> {
        let first = tokens
            .first()
            .ok_or_else(|| SptError::config("prompt set needs at least one layer"))?;
        if first.rank() != 2 {
            return Err(SptError::config("prompt tokens must be [N_p, D]"));
        }
        let shape = first.shape().to_vec();
        if tokens.iter().any(|t| t.shape() != shape) {
            return Err(SptError::config("all prompt layers must share one [N_p, D] shape"));
        }
        if mode == PromptMode::Shallow && tokens.len() != 1 {
            return Err(SptError::config("shallow prompts hold exactly one layer"));
        }
        let mut set = PromptSet {
            mode,
            tokens,
            frozen: false,
        };
        set.set_frozen(false);
        Ok(set)
    }

    pub fn shallow(tokens: Tensor<T>) -> Result<Self> {
        PromptSet::new(PromptMode::Shallow, vec![tokens])
    }

    pub fn deep(layers: Vec<Tensor<T>>) -> Result<Self> {
        PromptSet::new(PromptMode::Deep, layers)
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn n_p(&self) -> usize {
        self.tokens[0].shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens[0].shape()[1]
    }

    /// Insertion points (1 for shallow, L for deep).
    pub fn num_layers(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[Tensor<T>] {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tokens
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for t in &mut self.tokens {
            t.set_requires_grad(!frozen);
        }
    }

    /// Checks width and (for deep mode) layer count against a backbone.
    pub fn validate_for(&self, cfg: &VitConfig) -> Result<()> {
        if self.dim() != cfg.embed_dim {
            return Err(SptError::config(format!(
                "prompt width {} does not match backbone width {}",
                self.dim(),
                cfg.embed_dim
            )));
        }
        if self.mode == PromptMode::Deep && self.num_layers() != cfg.depth {
            return Err(SptError::config(format!(
                "deep prompts have {} layers, backbone has {}",
                self.num_layers(),
                cfg.depth
            )));
        }
        Ok(())
    }

    pub fn named_tokens(&self) -> Vec<(String, &Tensor<T>)> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("prompt.{i}"), t))
            .collect()
    }

    pub fn named_tokens_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.tokens
            .iter_mut()
            .enumerate()
            .map(|(i, t)| (format!("prompt.{i}"), t))
            .collect()
    }

    /// SHA-256 of all token values, for frozen-integrity checks.
    pub fn digest(&self) -> [u8; 32] {
        digest_named(self.named_tokens().into_iter().map(|(n, t)| (n, t)))
    }
}

/// Per-layer token matrices captured during a traced forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace<T> {
    /// Patch rows at every block boundary: `E_0 .. E_L`, each `[B, N_e, D]`.
    pub patch_bounds: Vec<Tensor<T>>,
    /// Prompt rows entering block i (Z_{i-1} for shallow, the inserted
    /// prompts for deep), each `[B, N_p, D]`; empty without prompts.
    pub prompt_inputs: Vec<Tensor<T>>,
    /// Prompt rows leaving block i (Z_i for shallow, the discarded rows
    /// for deep), each `[B, N_p, D]`.
    pub prompt_outputs: Vec<Tensor<T>>,
}

/// Prompt tokens registered on a tape.
pub struct StagedPrompts {
    pub ids: Vec<TensorId>,
    pub mode: PromptMode,
    pub n_p: usize,
    pub bindings: Vec<(String, TensorId)>,
}

pub fn stage_prompts<T: Scalar>(
    tape: &mut Tape<T>,
    prompts: &PromptSet<T>,
    use_grads: bool,
) -> StagedPrompts {
    let mut bindings = Vec::new();
    let ids = prompts
        .named_tokens()
        .into_iter()
        .map(|(name, t)| {
            let id = if use_grads {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            bindings.push((name, id));
            id
        })
        .collect();
    StagedPrompts {
        ids,
        mode: prompts.mode(),
        n_p: prompts.n_p(),
        bindings,
    }
}

/// Slot positions in the concatenated sequence.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub cls_pos: Option<usize>,
    pub prompt_start: usize,
    pub patch_start: usize,
    pub seq_len: usize,
}

pub fn layout(order: TokenOrder, has_cls: bool, n_p: usize, n_e: usize) -> Layout {
    let c = has_cls as usize;
    match order {
        TokenOrder::ClsPromptPatch => Layout {
            cls_pos: has_cls.then_some(0),
            prompt_start: c,
            patch_start: c + n_p,
            seq_len: c + n_p + n_e,
        },
        TokenOrder::PromptClsPatch => Layout {
            cls_pos: has_cls.then_some(n_p),
            prompt_start: 0,
            patch_start: n_p + c,
            seq_len: c + n_p + n_e,
        },
    }
}

/// Final block-boundary tokens after the block stack.
pub struct BlockEnds {
    pub cls_final: Option<TensorId>,
    pub patch_final: TensorId,
}

/// Runs the L-block stack with optional prompt attachment, capturing a
/// [`ForwardTrace`] when requested.
pub fn run_blocks<T: Scalar>(
    tape: &mut Tape<T>,
    vit: &TapedVit,
    cls: Option<TensorId>,
    patches: TensorId,
    prompts: Option<&StagedPrompts>,
    order: TokenOrder,
    mut trace: Option<&mut ForwardTrace<T>>,
) -> Result<BlockEnds> {
    let depth = vit.config.depth;
    let n_e = vit.config.num_patches();
    let batch = tape.shape(patches)[0];
    let has_cls = cls.is_some();
    let n_p = prompts.map(|p| p.n_p).unwrap_or(0);
    let lay = layout(order, has_cls, n_p, n_e);

    if let Some(tr) = trace.as_deref_mut() {
        tr.patch_bounds.push(tape.value(patches).clone());
    }

    let compose = |tape: &mut Tape<T>,
                   cls: Option<TensorId>,
                   prompt_b: Option<TensorId>,
                   patch: TensorId|
     -> Result<TensorId> {
        let mut parts: Vec<TensorId> = Vec::with_capacity(3);
        match order {
            TokenOrder::ClsPromptPatch => {
                if let Some(c) = cls {
                    parts.push(c);
                }
                if let Some(p) = prompt_b {
                    parts.push(p);
                }
            }
            TokenOrder::PromptClsPatch => {
                if let Some(p) = prompt_b {
                    parts.push(p);
                }
                if let Some(c) = cls {
                    parts.push(c);
                }
            }
        }
        parts.push(patch);
        tape.concat_axis1(&parts)
    };

    match prompts.map(|p| p.mode) {
        None => {
            // Plain ViT: one sequence through every block.
            let mut seq = compose(tape, cls, None, patches)?;
            for i in 0..depth {
                seq = vit.block(tape, seq, i)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.patch_bounds
                        .push(tape.value(seq).slice_axis1(lay.patch_start, n_e));
                }
            }
            Ok(BlockEnds {
                cls_final: match lay.cls_pos {
                    Some(p) => Some(tape.slice_axis1(seq, p, 1)?),
                    None => None,
                },
                patch_final: tape.slice_axis1(seq, lay.patch_start, n_e)?,
            })
        }
        Some(PromptMode::Shallow) => {
            let p = prompts.unwrap();
            let p_b = tape.repeat_rows(p.ids[0], batch)?;
            let mut seq = compose(tape, cls, Some(p_b), patches)?;
            for i in 0..depth {
                if let Some(tr) = trace.as_deref_mut() {
                    let v = tape.value(seq);
                    tr.prompt_inputs.push(v.slice_axis1(lay.prompt_start, n_p));
                }
                seq = vit.block(tape, seq, i)?;
                if let Some(tr) = trace.as_deref_mut() {
                    let v = tape.value(seq);
                    tr.prompt_outputs.push(v.slice_axis1(lay.prompt_start, n_p));
                    tr.patch_bounds.push(v.slice_axis1(lay.patch_start, n_e));
                }
            }
            Ok(BlockEnds {
                cls_final: match lay.cls_pos {
                    Some(pos) => Some(tape.slice_axis1(seq, pos, 1)?),
                    None => None,
                },
                patch_final: tape.slice_axis1(seq, lay.patch_start, n_e)?,
            })
        }
        Some(PromptMode::Deep) => {
            let p = prompts.unwrap();
            if p.ids.len() != depth {
                return Err(SptError::config(format!(
                    "deep prompting needs one prompt layer per block: have {}, need {depth}",
                    p.ids.len()
                )));
            }
            let mut cur_cls = cls;
            let mut cur_patch = patches;
            for i in 0..depth {
                let p_b = tape.repeat_rows(p.ids[i], batch)?;
                let seq = compose(tape, cur_cls, Some(p_b), cur_patch)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.prompt_inputs
                        .push(tape.value(seq).slice_axis1(lay.prompt_start, n_p));
                }
                let out = vit.block(tape, seq, i)?;
                // Outputs at the prompt positions are dropped here; only x
                // and E continue.
                cur_cls = match lay.cls_pos {
                    Some(pos) => Some(tape.slice_axis1(out, pos, 1)?),
                    None => None,
                };
                if let Some(tr) = trace.as_deref_mut() {
                    let v = tape.value(out);
                    tr.prompt_outputs.push(v.slice_axis1(lay.prompt_start, n_p));
                }
                cur_patch = tape.slice_axis1(out, lay.patch_start, n_e)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.patch_bounds.push(tape.value(cur_patch).clone());
                }
            }
            Ok(BlockEnds {
                cls_final: cur_cls,
                patch_final: cur_patch,
            })
        }
    }
}

// ---- value-level attachment (single-image formulations) --------------------

/// `[x_0, P_0, E_0]` concatenation on the sequence axis. `x0` is the CLS
/// embedding (absent in gap mode).
pub fn attach_shallow<T: Scalar>(
    x0: Option<&Tensor<T>>,
    p0: &Tensor<T>,
    e0: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = e0.shape().get(1).copied().unwrap_or(0);
    if p0.rank() != 2 || p0.shape()[1] != d {
        return Err(SptError::config(format!(
            "prompt width {:?} does not match patch width {:?}",
            p0.shape(),
            e0.shape()
        )));
    }
    let cls_row;
    let mut parts: Vec<&Tensor<T>> = Vec::with_capacity(3);
    if let Some(x) = x0 {
        if x.len() != d {
            return Err(SptError::config(format!(
                "cls width {} does not match patch width {d}",
                x.len()
            )));
        }
        cls_row = x.reshaped(vec![1, d])?;
        parts.push(&cls_row);
    }
    parts.push(p0);
    parts.push(e0);
    Tensor::vcat(&parts)
}

/// One deep-prompting step: block `i` (1-based) consumes
/// `[x_{i-1}, P_{i-1}, E_{i-1}]`; the prompt outputs are discarded and the
/// updated `(x_i, E_i)` pair is returned.
pub fn attach_deep_step<T: Scalar>(
    model: &VitModel<T>,
    x_prev: Option<&Tensor<T>>,
    e_prev: &Tensor<T>,
    prompts_for_layer: &Tensor<T>,
    block_index: usize,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    if block_index == 0 || block_index > model.config.depth {
        return Err(SptError::config(format!(
            "block index {block_index} outside 1..={}",
            model.config.depth
        )));
    }
    let seq = attach_shallow(x_prev, prompts_for_layer, e_prev)?;
    let out = model.block_forward(&seq, block_index - 1)?;
    let n_p = prompts_for_layer.shape()[0];
    let n_e = e_prev.shape()[0];
    let d = e_prev.shape()[1];
    let has_cls = x_prev.is_some();
    let c = has_cls as usize;
    let x_i = if has_cls {
        Some(Tensor::from_vec(vec![d], out.row(0).to_vec())?)
    } else {
        None
    };
    let start = (c + n_p) * d;
    let e_i = Tensor::from_vec(vec![n_e, d], out.data()[start..start + n_e * d].to_vec())?;
    Ok((x_i, e_i))
}

/// The trainable set under prompt tuning: prompt tokens (unless frozen)
/// plus the task head. Backbone parameters are never included.
#[derive(Debug, Clone)]
pub struct TrainableParams {
    pub names: Vec<String>,
    pub prompt_count: usize,
    pub head_count: usize,
}

impl TrainableParams {
    pub fn total(&self) -> usize {
        self.prompt_count + self.head_count
    }
}

pub fn trainable_parameters<T: Scalar>(
    model: &VitModel<T>,
    prompts: Option<&PromptSet<T>>,
) -> TrainableParams {
    let mut names = Vec::new();
    let mut prompt_count = 0;
    if let Some(p) = prompts {
        if !p.frozen() {
            for (name, t) in p.named_tokens() {
                prompt_count += t.len();
                names.push(name);
            }
        }
    }
    let head_count = model.head_w.len() + model.head_b.len();
    names.push("head.w".into());
    names.push("head.b".into());
    TrainableParams {
        names,
        prompt_count,
        head_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{HeadMode, VitConfig, VitModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(depth: usize) -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            depth,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            head_mode: HeadMode::ClsToken,
        }
    }

    fn rand_prompts(mode: PromptMode, layers: usize, n_p: usize, d: usize, seed: u64) -> PromptSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = (0..layers)
            .map(|_| Tensor::randn(vec![n_p, d], 0.5, &mut rng))
            .collect();
        PromptSet::new(mode, tokens).unwrap()
    }

    #[test]
    fn attach_shallow_empty_prompts_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e0 = Tensor::<f64>::randn(vec![4, 8], 1.0, &mut rng);
        let p0 = Tensor::<f64>::zeros(vec![0, 8]);
        let x0 = Tensor::<f64>::randn(vec![8], 1.0, &mut rng);
        let seq = attach_shallow(Some(&x0), &p0, &e0).unwrap();
        assert_eq!(seq.shape(), &[5, 8]);
        assert_eq!(&seq.data()[8..], e0.data());
        assert_eq!(&seq.data()[..8], x0.data());
    }

    #[test]
    fn attach_shallow_layout_positions() {
        let d = 4;
        let x0 = Tensor::<f64>::full(vec![d], 1.0);
        let p0 = Tensor::<f64>::full(vec![2, d], 2.0);
        let e0 = Tensor::<f64>::full(vec![3, d], 3.0);
        let seq = attach_shallow(Some(&x0), &p0, &e0).unwrap();
        assert_eq!(seq.shape(), &[6, d]);
        assert!(seq.row(0).iter().all(|&v| v == 1.0));
        assert!(seq.row(1).iter().all(|&v| v == 2.0));
        assert!(seq.row(2).iter().all(|&v| v == 2.0));
        assert!((3..6).all(|r| seq.row(r).iter().all(|&v| v == 3.0)));
    }

    #[test]
    fn attach_shallow_width_mismatch_is_config_error() {
        let p0 = Tensor::<f64>::zeros(vec![2, 5]);
        let e0 = Tensor::<f64>::zeros(vec![3, 4]);
        assert!(attach_shallow(None, &p0, &e0).is_err());
    }

    #[test]
    fn shallow_forward_matches_manual_extension_oracle() {
        let cfg = tiny_config(2);
        let model = VitModel::<f64>::init(cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let image = Tensor::randn(vec![1, 8, 8], 0.5, &mut rng);
        let prompts = rand_prompts(PromptMode::Shallow, 1, 1, cfg.embed_dim, 9);

        let got = model.forward_logits(&image, Some(&prompts)).unwrap();

        // Oracle: extend the block-1 input by hand and run the blocks one
        // at a time through the public single-sequence API.
        let e0 = model.patch_embed(&image).unwrap();
        let d = cfg.embed_dim;
        let cls = model.cls_token.as_ref().unwrap();
        let x0 = Tensor::from_vec(
            vec![d],
            cls.data()
                .iter()
                .zip(model.pos_embed.row(0))
                .map(|(&c, &p)| c + p)
                .collect(),
        )
        .unwrap();
        let mut seq = attach_shallow(Some(&x0), &prompts.tokens()[0], &e0).unwrap();
        for i in 0..cfg.depth {
            seq = model.block_forward(&seq, i).unwrap();
        }
        let pooled = Tensor::from_vec(vec![1, d], seq.row(0).to_vec()).unwrap();
        let want = pooled
            .matmul(&model.head_w)
            .unwrap()
            .add(&model.head_b.reshaped(vec![1, cfg.num_classes]).unwrap())
            .unwrap();
        assert!(got.reshaped(vec![1, cfg.num_classes]).unwrap().max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn deep_zero_prompts_equal_plain_forward() {
        let cfg = tiny_config(2);
        let model = VitModel::<f64>::init(cfg.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let images = Tensor::randn(vec![2, 1, 8, 8], 0.5, &mut rng);
        let empty = PromptSet::deep(vec![
            Tensor::zeros(vec![0, cfg.embed_dim]),
            Tensor::zeros(vec![0, cfg.embed_dim]),
        ])
        .unwrap();
        let with = model
            .forward_logits_batch(&images, Some(&empty), TokenOrder::ClsPromptPatch)
            .unwrap();
        let without = model
            .forward_logits_batch(&images, None, TokenOrder::ClsPromptPatch)
            .unwrap();
        assert_eq!(with.data(), without.data());
    }

    #[test]
    fn deep_blocks_see_fresh_prompts_not_evolved_ones() {
        let cfg = tiny_config(2);
        let model = VitModel::<f64>::init(cfg.clone(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let images = Tensor::randn(vec![1, 1, 8, 8], 0.5, &mut rng);
        let prompts = rand_prompts(PromptMode::Deep, 2, 1, cfg.embed_dim, 10);
        let (_, trace) = model
            .forward_traced(&images, Some(&prompts), TokenOrder::ClsPromptPatch)
            .unwrap();
        // Block 2's input prompt rows are exactly layer 2's prompts,
        // not block 1's prompt output.
        assert_eq!(trace.prompt_inputs[1].data(), prompts.tokens()[1].data());
        assert!(trace.prompt_inputs[1].max_abs_diff(&trace.prompt_outputs[0]) > 1e-6);
    }

    #[test]
    fn deep_forward_matches_manual_concatenation_oracle() {
        let cfg = tiny_config(3);
        let model = VitModel::<f64>::init(cfg.clone(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let image = Tensor::randn(vec![1, 8, 8], 0.5, &mut rng);
        let prompts = rand_prompts(PromptMode::Deep, 3, 2, cfg.embed_dim, 13);

        let got = model.forward_logits(&image, Some(&prompts)).unwrap();

        let d = cfg.embed_dim;
        let cls = model.cls_token.as_ref().unwrap();
        let mut x = Some(
            Tensor::from_vec(
                vec![d],
                cls.data()
                    .iter()
                    .zip(model.pos_embed.row(0))
                    .map(|(&c, &p)| c + p)
                    .collect(),
            )
            .unwrap(),
        );
        let mut e = model.patch_embed(&image).unwrap();
        for i in 1..=cfg.depth {
            let (nx, ne) =
                attach_deep_step(&model, x.as_ref(), &e, &prompts.tokens()[i - 1], i).unwrap();
            x = nx;
            e = ne;
        }
        let pooled = x.unwrap().reshaped(vec![1, d]).unwrap();
        let want = pooled
            .matmul(&model.head_w)
            .unwrap()
            .add(&model.head_b.reshaped(vec![1, cfg.num_classes]).unwrap())
            .unwrap();
        assert!(got.reshaped(vec![1, cfg.num_classes]).unwrap().max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn sequence_length_bookkeeping_every_deep_block() {
        let cfg = tiny_config(3);
        let model = VitModel::<f64>::init(cfg.clone(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let images = Tensor::randn(vec![2, 1, 8, 8], 0.5, &mut rng);
        let prompts = rand_prompts(PromptMode::Deep, 3, 2, cfg.embed_dim, 14);
        let (_, trace) = model
            .forward_traced(&images, Some(&prompts), TokenOrder::ClsPromptPatch)
            .unwrap();
        assert_eq!(trace.prompt_inputs.len(), cfg.depth);
        for layer in &trace.prompt_inputs {
            assert_eq!(layer.shape(), &[2, 2, cfg.embed_dim]);
        }
        for bound in &trace.patch_bounds {
            assert_eq!(bound.shape(), &[2, cfg.num_patches(), cfg.embed_dim]);
        }
    }

    #[test]
    fn cls_prompt_order_equivalence() {
        let cfg = tiny_config(2);
        let model = VitModel::<f64>::init(cfg.clone(), 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let images = Tensor::randn(vec![2, 1, 8, 8], 0.5, &mut rng);
        let prompts = rand_prompts(PromptMode::Deep, 2, 3, cfg.embed_dim, 19);
        let a = model
            .forward_logits_batch(&images, Some(&prompts), TokenOrder::ClsPromptPatch)
            .unwrap();
        let b = model
            .forward_logits_batch(&images, Some(&prompts), TokenOrder::PromptClsPatch)
            .unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn parameter_count_formulas() {
        // N_p x D and L x N_p x D plus the head.
        let mut cfg = VitConfig {
            image_size: 32,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            num_classes: 10,
            head_mode: HeadMode::ClsToken,
        };
        cfg.validate().unwrap();
        let model = VitModel::<f32>::init(cfg.clone(), 0).unwrap();

        let shallow = PromptSet::shallow(Tensor::<f32>::zeros(vec![100, 768])).unwrap();
        let rep = trainable_parameters(&model, Some(&shallow));
        assert_eq!(rep.prompt_count, 76_800);

        let deep = PromptSet::deep((0..12).map(|_| Tensor::zeros(vec![20, 768])).collect()).unwrap();
        let rep = trainable_parameters(&model, Some(&deep));
        assert_eq!(rep.prompt_count, 184_320);
        assert_eq!(rep.head_count, 768 * 10 + 10);
    }

    #[test]
    fn frozen_prompts_leave_head_only() {
        let cfg = tiny_config(2);
        let model = VitModel::<f32>::init(cfg.clone(), 0).unwrap();
        let mut prompts = rand_prompts(PromptMode::Deep, 2, 2, cfg.embed_dim, 20);
        let mut p32 = PromptSet::<f32>::deep(
            prompts
                .tokens()
                .iter()
                .map(|t| {
                    Tensor::from_vec(
                        t.shape().to_vec(),
                        t.data().iter().map(|&v| v as f32).collect(),
                    )
                    .unwrap()
                })
                .collect(),
        )
        .unwrap();
        p32.set_frozen(true);
        prompts.set_frozen(true);
        let rep = trainable_parameters(&model, Some(&p32));
        assert_eq!(rep.prompt_count, 0);
        assert_eq!(rep.names, vec!["head.w".to_string(), "head.b".to_string()]);
    }

    #[test]
    fn discarded_prompt_outputs_never_reach_later_blocks() {
        // Replaying the forward with the discarded rows zeroed out must
        // reproduce the exact same downstream values.
        let cfg = tiny_config(3);
        let model = VitModel::<f64>::init(cfg.clone(), 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let image = Tensor::randn(vec![1, 8, 8], 0.5, &mut rng);
        let prompts = rand_prompts(PromptMode::Deep, 3, 2, cfg.embed_dim, 25);

        let reference = model.forward_logits(&image, Some(&prompts)).unwrap();

        // Manual replay where prompt outputs are overwritten with zeros
        // before the fresh prompts are inserted.
        let d = cfg.embed_dim;
        let cls = model.cls_token.as_ref().unwrap();
        let x0 = Tensor::from_vec(
            vec![d],
            cls.data()
                .iter()
                .zip(model.pos_embed.row(0))
                .map(|(&c, &p)| c + p)
                .collect(),
        )
        .unwrap();
        let e0 = model.patch_embed(&image).unwrap();
        let (mut x, mut e) = (x0, e0);
        for i in 0..cfg.depth {
            let seq = attach_shallow(Some(&x), &prompts.tokens()[i], &e).unwrap();
            let mut out = model.block_forward(&seq, i).unwrap();
            // zero the prompt rows (they are about to be discarded anyway)
            let n_p = prompts.n_p();
            for r in 1..1 + n_p {
                let row = r * d;
                out.data_mut()[row..row + d].fill(0.0);
            }
            x = Tensor::from_vec(vec![d], out.row(0).to_vec()).unwrap();
            let start = (1 + n_p) * d;
            e = Tensor::from_vec(
                vec![cfg.num_patches(), d],
                out.data()[start..start + cfg.num_patches() * d].to_vec(),
            )
            .unwrap();
        }
        let pooled = x.reshaped(vec![1, d]).unwrap();
        let want = pooled
            .matmul(&model.head_w)
            .unwrap()
            .add(&model.head_b.reshaped(vec![1, cfg.num_classes]).unwrap())
            .unwrap();
        assert!(
            reference
                .reshaped(vec![1, cfg.num_classes])
                .unwrap()
                .max_abs_diff(&want)
                < 1e-9
        );
    }
}
