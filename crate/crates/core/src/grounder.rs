//! The white-box victim: a small differentiable REC model.
//!
//! Vision encoder: the image is centered to [-1,1], cut into 8x8 patches,
//! each patch flattened and passed through a shared affine+tanh layer, and
//! the concatenated patch features pass through a second affine+tanh layer
//! into a 64-dim embedding. A closed-vocabulary prompt
//! embedding table and four per-step affine decoder heads (with
//! previous-token embedding feedback) produce 100 coordinate-token logits
//! per step. Everything is float64 and differentiates through `gradcore`,
//! which is what the attack objectives rely on.

use crate::boxcodec::{BoxTokenSeq, BIN_COUNT, SEQ_LEN};
use crate::gradcore::{GradError, Gradients, NodeId, Tape, Tensor};
use crate::scenegen::{ReferringExpression, SceneAnnotation, CHANNELS, IMAGE_SIZE, PROMPT_VOCAB};
use crate::tensorio::{self, Dtype};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Flattened image length.
pub const INPUT_DIM: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
/// Patch side in pixels; patches tile the canvas without overlap.
pub const PATCH_SIZE: usize = 8;
/// Patches per image.
pub const PATCH_COUNT: usize = (IMAGE_SIZE / PATCH_SIZE) * (IMAGE_SIZE / PATCH_SIZE);
/// Flattened patch length (all channels).
pub const PATCH_DIM: usize = CHANNELS * PATCH_SIZE * PATCH_SIZE;
/// Per-patch feature width out of the shared first encoder layer.
pub const PATCH_FEATURES: usize = 32;
/// Image embedding dimension (output of the vision encoder).
pub const EMBED_DIM: usize = 64;
/// Prompt-word embedding width (two words per prompt).
pub const PROMPT_EMBED: usize = 16;
/// Previous-token embedding width; row 0 is the begin-of-sequence slot.
pub const TOKEN_EMBED: usize = 16;
/// Decoder hidden width per step.
pub const DEC_HIDDEN: usize = 128;
/// Decoder input: image embedding + two prompt words + previous token.
pub const DEC_INPUT: usize = EMBED_DIM + 2 * PROMPT_EMBED + TOKEN_EMBED;

const CHECKPOINT_MAGIC: &[u8; 8] = b"RECCKPT\0";
const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum GrounderError {
    #[error("image shape {0:?} is not {CHANNELS}x{IMAGE_SIZE}x{IMAGE_SIZE}")]
    BadImageShape(Vec<usize>),
    #[error("graph error: {0}")]
    Graph(#[from] GradError),
    #[error("training diverged: loss became non-finite at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("training split is empty")]
    EmptySplit,
    #[error("invalid train config: {0}")]
    BadConfig(&'static str),
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<(), GrounderError> {
        if self.learning_rate <= 0.0 {
            return Err(GrounderError::BadConfig("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(GrounderError::BadConfig("batch_size must be positive"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 60,
            batch_size: 32,
            seed: 11,
        }
    }
}

/// Parameter tensors, all float64. Order of `named_tensors` is the
/// checkpoint order and must stay stable.
#[derive(Debug, Clone, PartialEq)]
pub struct GrounderModel {
    pub(crate) enc_w1: Tensor,
    pub(crate) enc_b1: Tensor,
    pub(crate) enc_w2: Tensor,
    pub(crate) enc_b2: Tensor,
    pub(crate) prompt_table: Tensor,
    pub(crate) token_table: Tensor,
    pub(crate) dec_w: [Tensor; SEQ_LEN],
    pub(crate) dec_b: [Tensor; SEQ_LEN],
    pub(crate) dec_u: [Tensor; SEQ_LEN],
    pub(crate) dec_c: [Tensor; SEQ_LEN],
}

/// Flat-image indices of patch `p` (row-major over the patch grid), ordered
/// channel-major then row-major within the patch.
fn patch_indices(p: usize) -> Vec<usize> {
    let per_side = IMAGE_SIZE / PATCH_SIZE;
    let (py, px) = (p / per_side, p % per_side);
    let mut idx = Vec::with_capacity(PATCH_DIM);
    for ch in 0..CHANNELS {
        for r in 0..PATCH_SIZE {
            for c in 0..PATCH_SIZE {
                idx.push(
                    ch * IMAGE_SIZE * IMAGE_SIZE
                        + (py * PATCH_SIZE + r) * IMAGE_SIZE
                        + (px * PATCH_SIZE + c),
                );
            }
        }
    }
    idx
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let fan_in = *shape.last().unwrap() as f64;
    let bound = 1.0 / fan_in.sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).unwrap()
}

impl GrounderModel {
    /// Deterministic scaled-uniform initialization.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dec_w = Vec::new();
        let mut dec_b = Vec::new();
        let mut dec_u = Vec::new();
        let mut dec_c = Vec::new();
        let enc_w1 = uniform_tensor(&mut rng, vec![PATCH_FEATURES, PATCH_DIM]);
        let enc_b1 = Tensor::zeros(vec![PATCH_FEATURES]);
        let enc_w2 = uniform_tensor(&mut rng, vec![EMBED_DIM, PATCH_COUNT * PATCH_FEATURES]);
        let enc_b2 = Tensor::zeros(vec![EMBED_DIM]);
        let prompt_table = uniform_tensor(&mut rng, vec![PROMPT_VOCAB, PROMPT_EMBED]);
        let token_table = uniform_tensor(&mut rng, vec![BIN_COUNT + 1, TOKEN_EMBED]);
        for _ in 0..SEQ_LEN {
            dec_w.push(uniform_tensor(&mut rng, vec![DEC_HIDDEN, DEC_INPUT]));
            dec_b.push(Tensor::zeros(vec![DEC_HIDDEN]));
            dec_u.push(uniform_tensor(&mut rng, vec![BIN_COUNT, DEC_HIDDEN]));
            dec_c.push(Tensor::zeros(vec![BIN_COUNT]));
        }
        Self {
            enc_w1,
            enc_b1,
            enc_w2,
            enc_b2,
            prompt_table,
            token_table,
            dec_w: dec_w.try_into().unwrap(),
            dec_b: dec_b.try_into().unwrap(),
            dec_u: dec_u.try_into().unwrap(),
            dec_c: dec_c.try_into().unwrap(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("enc_w1".to_string(), &self.enc_w1),
            ("enc_b1".to_string(), &self.enc_b1),
            ("enc_w2".to_string(), &self.enc_w2),
            ("enc_b2".to_string(), &self.enc_b2),
            ("prompt_table".to_string(), &self.prompt_table),
            ("token_table".to_string(), &self.token_table),
        ];
        for j in 0..SEQ_LEN {
            out.push((format!("dec_w{j}"), &self.dec_w[j]));
            out.push((format!("dec_b{j}"), &self.dec_b[j]));
            out.push((format!("dec_u{j}"), &self.dec_u[j]));
            out.push((format!("dec_c{j}"), &self.dec_c[j]));
        }
        out
    }

    /// Start a fresh computation graph over this model's parameters.
    pub fn graph(&self, mode: GraphMode) -> ModelGraph<'_> {
        ModelGraph::new(self, mode)
    }

    /// Embedding f(x) of a 3x32x32 image, outside any attack graph.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor, GrounderError> {
        let mut g = self.graph(GraphMode::Inference);
        let x = g.image_leaf(image)?;
        let e = g.encode(x)?;
        Ok(g.tape.value(e).clone())
    }

    /// Teacher-forced negative log-likelihood of a token sequence.
    pub fn sequence_nll(
        &self,
        image: &Tensor,
        prompt: &ReferringExpression,
        seq: &BoxTokenSeq,
    ) -> Result<f64, GrounderError> {
        let mut g = self.graph(GraphMode::Inference);
        let x = g.image_leaf(image)?;
        let e = g.encode(x)?;
        let nll = g.sequence_nll(e, prompt, seq)?;
        Ok(g.tape.value(nll).item())
    }

    /// Greedy (argmax, lowest-id tie-break) decode of the 4 coordinate
    /// tokens for one prompt.
    pub fn greedy_decode(
        &self,
        image: &Tensor,
        prompt: &ReferringExpression,
    ) -> Result<BoxTokenSeq, GrounderError> {
        let mut g = self.graph(GraphMode::Inference);
        let x = g.image_leaf(image)?;
        let e = g.encode(x)?;
        g.greedy_decode(e, prompt)
    }

    /// Plain mini-batch gradient descent on the mean sequence NLL over all
    /// (scene, object) pairs. Returns the per-epoch mean loss curve.
    pub fn train(
        &mut self,
        split: &[SceneAnnotation],
        cfg: &TrainConfig,
    ) -> Result<Vec<f64>, GrounderError> {
        cfg.validate()?;
        if split.is_empty() {
            return Err(GrounderError::EmptySplit);
        }
        let pairs: Vec<(usize, usize)> = split
            .iter()
            .enumerate()
            .flat_map(|(si, s)| (0..s.objects.len()).map(move |oi| (si, oi)))
            .collect();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut curve = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            // Fisher-Yates with the config RNG keeps shuffling reproducible.
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let mut epoch_loss = 0.0;
            for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let mut g = self.graph(GraphMode::Training);
                let mut nlls = Vec::with_capacity(chunk.len());
                for &k in chunk {
                    let (si, oi) = pairs[k];
                    let scene = &split[si];
                    let obj = &scene.objects[oi];
                    let x = g.image_constant(&scene.image)?;
                    let e = g.encode(x)?;
                    let seq = crate::boxcodec::encode_box(&obj.gt_box);
                    nlls.push(g.sequence_nll(e, &obj.prompt, &seq)?);
                }
                let total = g.sum_scalars(&nlls)?;
                let loss = g.tape.scale(total, 1.0 / chunk.len() as f64);
                let loss_val = g.tape.value(loss).item();
                if !loss_val.is_finite() {
                    return Err(GrounderError::Diverged {
                        epoch,
                        batch: batch_idx,
                    });
                }
                epoch_loss += loss_val * chunk.len() as f64;
                let ids = g.param_ids().clone();
                let grads = g.tape.backward(loss)?;
                drop(g);
                self.apply_gradient_step(&ids, &grads, cfg.learning_rate);
            }
            curve.push(epoch_loss / pairs.len() as f64);
        }
        Ok(curve)
    }

    fn apply_gradient_step(&mut self, ids: &ParamIds, grads: &Gradients, lr: f64) {
        let step = |t: &mut Tensor, id: NodeId| {
            let grad = grads.grad(id);
            for (w, d) in t.data_mut().iter_mut().zip(grad.data()) {
                *w -= lr * d;
            }
        };
        step(&mut self.enc_w1, ids.enc_w1);
        step(&mut self.enc_b1, ids.enc_b1);
        step(&mut self.enc_w2, ids.enc_w2);
        step(&mut self.enc_b2, ids.enc_b2);
        step(&mut self.prompt_table, ids.prompt_table);
        step(&mut self.token_table, ids.token_table);
        for j in 0..SEQ_LEN {
            step(&mut self.dec_w[j], ids.dec_w[j]);
            step(&mut self.dec_b[j], ids.dec_b[j]);
            step(&mut self.dec_u[j], ids.dec_u[j]);
            step(&mut self.dec_c[j], ids.dec_c[j]);
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), GrounderError> {
        let io = |e: std::io::Error| GrounderError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&[CHECKPOINT_VERSION]).map_err(io)?;
        let named = self.named_tensors();
        w.write_all(&(named.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, tensor) in named {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(bytes).map_err(io)?;
            tensorio::write_tensor(&mut w, tensor, Dtype::F64).map_err(|e| {
                GrounderError::Checkpoint {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                }
            })?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, GrounderError> {
        let io = |e: std::io::Error| GrounderError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let bad = |reason: String| GrounderError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut head = [0u8; 9];
        r.read_exact(&mut head).map_err(io)?;
        if &head[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic: not a checkpoint".into()));
        }
        if head[8] != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", head[8])));
        }
        let mut count_b = [0u8; 4];
        r.read_exact(&mut count_b).map_err(io)?;
        let count = u32::from_le_bytes(count_b) as usize;

        let mut model = Self::init(0);
        let expected = model.named_tensors();
        if count != expected.len() {
            return Err(bad(format!(
                "expected {} tensors, file has {count}",
                expected.len()
            )));
        }
        let expected_names: Vec<(String, Vec<usize>)> = expected
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        let mut loaded = Vec::with_capacity(count);
        for (name, shape) in &expected_names {
            let mut len_b = [0u8; 4];
            r.read_exact(&mut len_b).map_err(io)?;
            let mut name_b = vec![0u8; u32::from_le_bytes(len_b) as usize];
            r.read_exact(&mut name_b).map_err(io)?;
            let got = String::from_utf8(name_b).map_err(|e| bad(e.to_string()))?;
            if &got != name {
                return Err(bad(format!("expected tensor {name:?}, found {got:?}")));
            }
            let t = tensorio::read_tensor_embedded(&mut r)
                .map_err(|e| bad(format!("tensor {name}: {e}")))?;
            if t.shape() != shape.as_slice() {
                return Err(bad(format!(
                    "tensor {name}: shape {:?} vs expected {shape:?}",
                    t.shape()
                )));
            }
            loaded.push(t);
        }
        let mut it = loaded.into_iter();
        model.enc_w1 = it.next().unwrap();
        model.enc_b1 = it.next().unwrap();
        model.enc_w2 = it.next().unwrap();
        model.enc_b2 = it.next().unwrap();
        model.prompt_table = it.next().unwrap();
        model.token_table = it.next().unwrap();
        for j in 0..SEQ_LEN {
            model.dec_w[j] = it.next().unwrap();
            model.dec_b[j] = it.next().unwrap();
            model.dec_u[j] = it.next().unwrap();
            model.dec_c[j] = it.next().unwrap();
        }
        Ok(model)
    }
}

/// Whether model parameters enter the graph as differentiable leaves
/// (training) or constants (attacks and inference, where only the image
/// carries gradient).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphMode {
    Training,
    Inference,
}

#[derive(Debug, Clone)]
pub struct ParamIds {
    pub enc_w1: NodeId,
    pub enc_b1: NodeId,
    pub enc_w2: NodeId,
    pub enc_b2: NodeId,
    pub prompt_table: NodeId,
    pub token_table: NodeId,
    pub dec_w: [NodeId; SEQ_LEN],
    pub dec_b: [NodeId; SEQ_LEN],
    pub dec_u: [NodeId; SEQ_LEN],
    pub dec_c: [NodeId; SEQ_LEN],
}

/// A computation graph bound to one model instance.
pub struct ModelGraph<'m> {
    pub tape: Tape,
    param_ids: ParamIds,
    _model: &'m GrounderModel,
}

impl<'m> ModelGraph<'m> {
    fn new(model: &'m GrounderModel, mode: GraphMode) -> Self {
        let mut tape = Tape::new();
        let mut put = |t: &Tensor| match mode {
            GraphMode::Training => tape.leaf(t.clone()),
            GraphMode::Inference => tape.constant(t.clone()),
        };
        let param_ids = ParamIds {
            enc_w1: put(&model.enc_w1),
            enc_b1: put(&model.enc_b1),
            enc_w2: put(&model.enc_w2),
            enc_b2: put(&model.enc_b2),
            prompt_table: put(&model.prompt_table),
            token_table: put(&model.token_table),
            dec_w: std::array::from_fn(|j| put(&model.dec_w[j])),
            dec_b: std::array::from_fn(|j| put(&model.dec_b[j])),
            dec_u: std::array::from_fn(|j| put(&model.dec_u[j])),
            dec_c: std::array::from_fn(|j| put(&model.dec_c[j])),
        };
        Self {
            tape,
            param_ids,
            _model: model,
        }
    }

    pub fn param_ids(&self) -> &ParamIds {
        &self.param_ids
    }

    fn check_image(image: &Tensor) -> Result<(), GrounderError> {
        if image.shape() != [CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(GrounderError::BadImageShape(image.shape().to_vec()));
        }
        Ok(())
    }

    /// Insert the image as a differentiable leaf (gradient target of the
    /// attacks). Stored flattened.
    pub fn image_leaf(&mut self, image: &Tensor) -> Result<NodeId, GrounderError> {
        Self::check_image(image)?;
        Ok(self.tape.leaf(image.flattened()))
    }

    /// Insert the image as a constant (no gradient), e.g. the clean branch
    /// of the embedding attack or training inputs.
    pub fn image_constant(&mut self, image: &Tensor) -> Result<NodeId, GrounderError> {
        Self::check_image(image)?;
        Ok(self.tape.constant(image.flattened()))
    }

    /// Vision encoder f(x): centered pixels cut into 8x8 patches, a shared
    /// affine+tanh over each flattened patch, then an affine+tanh over the
    /// concatenated patch features.
    pub fn encode(&mut self, image: NodeId) -> Result<NodeId, GrounderError> {
        let half = self
            .tape
            .constant(Tensor::new(vec![INPUT_DIM], vec![0.5; INPUT_DIM]).unwrap());
        let centered = self.tape.sub(image, half)?;
        let scaled = self.tape.scale(centered, 2.0);
        let ids = self.param_ids.clone();
        let mut features = Vec::with_capacity(PATCH_COUNT);
        for p in 0..PATCH_COUNT {
            let patch = self.tape.gather_rows(scaled, &patch_indices(p))?;
            let z = self.tape.matmul(ids.enc_w1, patch)?;
            let zb = self.tape.add(z, ids.enc_b1)?;
            features.push(self.tape.tanh(zb));
        }
        let h1 = self.tape.concat(&features)?;
        let z2 = self.tape.matmul(ids.enc_w2, h1)?;
        let z2b = self.tape.add(z2, ids.enc_b2)?;
        Ok(self.tape.tanh(z2b))
    }

    fn prompt_vector(&mut self, prompt: &ReferringExpression) -> Result<NodeId, GrounderError> {
        let ids = prompt.token_ids();
        Ok(self
            .tape
            .gather_rows(self.param_ids.prompt_table, &ids)?)
    }

    /// Logits for decode step `j` given the previous token (`None` at j=0).
    fn step_logits(
        &mut self,
        j: usize,
        embedding: NodeId,
        prompt_vec: NodeId,
        prev_token: Option<usize>,
    ) -> Result<NodeId, GrounderError> {
        let prev_row = match prev_token {
            None => 0,
            Some(t) => t + 1,
        };
        let prev = self
            .tape
            .gather_rows(self.param_ids.token_table, &[prev_row])?;
        let z = self.tape.concat(&[embedding, prompt_vec, prev])?;
        let ids = self.param_ids.clone();
        let a = self.tape.matmul(ids.dec_w[j], z)?;
        let ab = self.tape.add(a, ids.dec_b[j])?;
        let h = self.tape.tanh(ab);
        let l = self.tape.matmul(ids.dec_u[j], h)?;
        Ok(self.tape.add(l, ids.dec_c[j])?)
    }

    /// -sum_j log p(s_j | s_<j, x, t), teacher-forced on `seq`.
    pub fn sequence_nll(
        &mut self,
        embedding: NodeId,
        prompt: &ReferringExpression,
        seq: &BoxTokenSeq,
    ) -> Result<NodeId, GrounderError> {
        let pv = self.prompt_vector(prompt)?;
        let mut picked = Vec::with_capacity(SEQ_LEN);
        let mut prev = None;
        for (j, &tok) in seq.tokens().iter().enumerate() {
            let logits = self.step_logits(j, embedding, pv, prev)?;
            let logp = self.tape.log_softmax(logits)?;
            picked.push(self.tape.gather_rows(logp, &[tok])?);
            prev = Some(tok);
        }
        let cat = self.tape.concat(&picked)?;
        let total = self.tape.sum(cat);
        Ok(self.tape.scale(total, -1.0))
    }

    pub fn greedy_decode(
        &mut self,
        embedding: NodeId,
        prompt: &ReferringExpression,
    ) -> Result<BoxTokenSeq, GrounderError> {
        let pv = self.prompt_vector(prompt)?;
        let mut tokens = [0usize; SEQ_LEN];
        let mut prev = None;
        for (j, slot) in tokens.iter_mut().enumerate() {
            let logits = self.step_logits(j, embedding, pv, prev)?;
            let data = self.tape.value(logits).data();
            let mut best = 0;
            for (k, &v) in data.iter().enumerate() {
                if v > data[best] {
                    best = k;
                }
            }
            *slot = best;
            prev = Some(best);
        }
        Ok(BoxTokenSeq::new(tokens).expect("argmax token < BIN_COUNT"))
    }

    /// Sum a list of scalar nodes.
    pub fn sum_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId, GrounderError> {
        assert!(!xs.is_empty());
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.tape.add(acc, x)?;
        }
        Ok(acc)
    }
}
