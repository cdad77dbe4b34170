//! Asymmetric execution engine.
//!
//! Training reshapes the ordered tile sequence into chunks and processes all
//! of them on one differentiation tape; inference iterates chunk mini-batches
//! on short-lived tapes, keeping only one representative token per chunk, so
//! the local stage's peak memory is independent of slide size.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    bimamba2, gated_attention, gated_cnn_1d, BiMambaParams, BiMambaVars, GatedAttnParams,
    GatedAttnVars, GatedCnnParams, GatedCnnVars,
};
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::ledger::MemoryLedger;
use crate::tensor::{read_tensor, write_tensor, Dtype, Tape, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 4] = b"SLCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Which mixers run in which stage. `Full` is the hybrid; the others are
/// the structure-ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Local gated CNN, global bidirectional scan.
    Full,
    /// Local gated CNN only; pooled tokens go straight to attention.
    LocalOnly,
    /// Bidirectional scan over every tile, no chunk compression.
    GlobalOnly,
    /// Local bidirectional scan, global gated CNN.
    Reversed,
}

impl Structure {
    pub fn name(&self) -> &'static str {
        match self {
            Structure::Full => "full",
            Structure::LocalOnly => "local_only",
            Structure::GlobalOnly => "global_only",
            Structure::Reversed => "reversed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Structure::Full),
            "local_only" | "local-only" => Ok(Structure::LocalOnly),
            "global_only" | "global-only" => Ok(Structure::GlobalOnly),
            "reversed" => Ok(Structure::Reversed),
            other => Err(Error::Config(format!("unknown structure '{other}'"))),
        }
    }
}

/// Width bookkeeping for every block in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub d_pass: usize,
    pub d_conv: usize,
    pub kernel: usize,
    pub d_attn: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub num_outputs: usize,
    pub chunk_len: usize,
}

impl ModelDims {
    /// Defaults: split widths at D/2 each (gate = their sum), kernel 3,
    /// attention width D/2, scan inner width D with 16 states, chunks of 64.
    pub fn new(feature_dim: usize, num_outputs: usize) -> Self {
        let half = feature_dim.div_ceil(2);
        ModelDims {
            feature_dim,
            d_pass: half,
            d_conv: half,
            kernel: 3,
            d_attn: half.max(1),
            d_inner: feature_dim,
            d_state: 16,
            num_outputs,
            chunk_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("d_pass", self.d_pass),
            ("d_conv", self.d_conv),
            ("d_attn", self.d_attn),
            ("d_inner", self.d_inner),
            ("d_state", self.d_state),
            ("num_outputs", self.num_outputs),
            ("chunk_len", self.chunk_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("conv kernel must be odd".into()));
        }
        Ok(())
    }
}

/// All learnable weights plus the structural configuration they serve.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub structure: Structure,
    pub task: TaskKind,
    pub cnn: GatedCnnParams,
    pub local_attn: GatedAttnParams,
    pub bimamba: BiMambaParams,
    pub global_attn: GatedAttnParams,
    /// `[D × num_outputs]`, no bias.
    pub head: Tensor,
}

impl ModelParams {
    pub fn init(dims: ModelDims, structure: Structure, task: TaskKind, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.feature_dim;
        let cnn = GatedCnnParams::init(d, dims.d_pass, dims.d_conv, dims.kernel, &mut rng)?;
        let local_attn = GatedAttnParams::init(d, dims.d_attn, &mut rng);
        let bimamba = BiMambaParams::init(d, dims.d_inner, dims.d_state, &mut rng);
        let global_attn = GatedAttnParams::init(d, dims.d_attn, &mut rng);
        let bound = 1.0 / (d as f64).sqrt();
        let head = Tensor::from_fn(&[d, dims.num_outputs], |_| {
            use rand::Rng;
            rng.gen_range(-bound..bound)
        });
        Ok(ModelParams { dims, structure, task, cnn, local_attn, bimamba, global_attn, head })
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        self.cnn.visit("cnn", f);
        self.local_attn.visit("local_attn", f);
        self.bimamba.visit("bimamba", f);
        self.global_attn.visit("global_attn", f);
        f("head".to_string(), &self.head);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.cnn.visit_mut("cnn", f);
        self.local_attn.visit_mut("local_attn", f);
        self.bimamba.visit_mut("bimamba", f);
        self.global_attn.visit_mut("global_attn", f);
        f("head".to_string(), &mut self.head);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Overwrite every tensor with fan-in-scaled noise (gradient tests need
    /// nonzero output projections).
    pub fn randomize(&mut self, seed: u64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.visit_mut(&mut |_, t| {
            let fan_in = t.shape()[0].max(1);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        });
    }

    /// Register every parameter on the tape. The binding order matches
    /// [`ModelParams::visit`], so gradients can be read back by position.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let local = self.bind_local(tape);
        let global = self.bind_global(tape);
        let mut names = Vec::new();
        // Rebuild the name list in visit order, mapping to the bound vars.
        // Blocks unused by the active structure stay unbound (`None`).
        let lookup = build_var_lookup(&local, &global);
        self.visit(&mut |name, _| {
            let var = lookup.get(name.as_str()).copied();
            names.push((name, var));
        });
        ModelVars { dims: self.dims, structure: self.structure, local, global, names }
    }

    /// Bind only what the local stage needs (streaming mini-batch tapes).
    pub fn bind_local(&self, tape: &mut Tape) -> LocalStageVars {
        LocalStageVars {
            dims: self.dims,
            structure: self.structure,
            cnn: self.cnn.bind(tape),
            attn: self.local_attn.bind(tape),
            bimamba: match self.structure {
                Structure::Reversed => Some(self.bimamba.bind(tape)),
                _ => None,
            },
        }
    }

    /// Bind only what the global stage needs. Each block belongs to exactly
    /// one stage under every structure, so nothing is bound twice.
    pub fn bind_global(&self, tape: &mut Tape) -> GlobalStageVars {
        GlobalStageVars {
            dims: self.dims,
            structure: self.structure,
            bimamba: match self.structure {
                Structure::Full | Structure::GlobalOnly => Some(self.bimamba.bind(tape)),
                Structure::Reversed | Structure::LocalOnly => None,
            },
            cnn: match self.structure {
                Structure::Reversed => Some(self.cnn.bind(tape)),
                _ => None,
            },
            attn: self.global_attn.bind(tape),
            head: tape.input(self.head.clone()),
        }
    }
}

fn build_var_lookup(local: &LocalStageVars, global: &GlobalStageVars) -> HashMap<String, Var> {
    let mut map = HashMap::new();
    let cnn = global.cnn.as_ref().unwrap_or(&local.cnn);
    insert_cnn(&mut map, "cnn", cnn);
    insert_attn(&mut map, "local_attn", &local.attn);
    if let Some(bm) = global.bimamba.as_ref().or(local.bimamba.as_ref()) {
        insert_bimamba(&mut map, "bimamba", bm);
    }
    insert_attn(&mut map, "global_attn", &global.attn);
    map.insert("head".into(), global.head);
    map
}

fn insert_cnn(map: &mut HashMap<String, Var>, p: &str, v: &GatedCnnVars) {
    map.insert(format!("{p}.ln.gain"), v.ln.gain);
    map.insert(format!("{p}.ln.bias"), v.ln.bias);
    map.insert(format!("{p}.w_in"), v.w_in);
    map.insert(format!("{p}.conv_kernel"), v.conv_kernel);
    map.insert(format!("{p}.w_out"), v.w_out);
}

fn insert_attn(map: &mut HashMap<String, Var>, p: &str, v: &GatedAttnVars) {
    map.insert(format!("{p}.v"), v.v);
    map.insert(format!("{p}.u"), v.u);
    map.insert(format!("{p}.w"), v.w);
}

fn insert_ssm(map: &mut HashMap<String, Var>, p: &str, v: &crate::blocks::SsmVars) {
    map.insert(format!("{p}.w_in"), v.w_in);
    map.insert(format!("{p}.w_b"), v.w_b);
    map.insert(format!("{p}.w_c"), v.w_c);
    map.insert(format!("{p}.w_delta"), v.w_delta);
    map.insert(format!("{p}.delta_bias"), v.delta_bias);
    map.insert(format!("{p}.decay"), v.decay);
    map.insert(format!("{p}.skip"), v.skip);
    map.insert(format!("{p}.w_out"), v.w_out);
}

fn insert_bimamba(map: &mut HashMap<String, Var>, p: &str, v: &BiMambaVars) {
    insert_ssm(map, &format!("{p}.fwd"), &v.fwd);
    insert_ssm(map, &format!("{p}.bwd"), &v.bwd);
    map.insert(format!("{p}.ln_pre.gain"), v.ln_pre.gain);
    map.insert(format!("{p}.ln_pre.bias"), v.ln_pre.bias);
    map.insert(format!("{p}.ln_post.gain"), v.ln_post.gain);
    map.insert(format!("{p}.ln_post.bias"), v.ln_post.bias);
}

#[derive(Debug, Clone)]
pub struct LocalStageVars {
    pub dims: ModelDims,
    pub structure: Structure,
    pub cnn: GatedCnnVars,
    pub attn: GatedAttnVars,
    pub bimamba: Option<BiMambaVars>,
}

#[derive(Debug, Clone)]
pub struct GlobalStageVars {
    pub dims: ModelDims,
    pub structure: Structure,
    pub bimamba: Option<BiMambaVars>,
    pub cnn: Option<GatedCnnVars>,
    pub attn: GatedAttnVars,
    pub head: Var,
}

/// Whole model bound on one tape (training path).
pub struct ModelVars {
    pub dims: ModelDims,
    pub structure: Structure,
    pub local: LocalStageVars,
    pub global: GlobalStageVars,
    /// `(name, var)` pairs in [`ModelParams::visit`] order; `None` for
    /// parameters of blocks the active structure does not use.
    pub names: Vec<(String, Option<Var>)>,
}

impl ModelVars {
    /// Parameter gradients by visit position. `None` for parameters that
    /// received no gradient (blocks unused by the active structure).
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        self.names
            .iter()
            .map(|(_, v)| v.and_then(|var| tape.grad(var).map(|g| g.to_vec())))
            .collect()
    }
}

// ── local stage ──────────────────────────────────────────────────────

/// Compress one chunk into its representative token.
/// Returns the `[1×D]` token and the `[L]` attention weights.
pub fn local_token(
    tape: &mut Tape,
    chunk: Var,
    valid: usize,
    vars: &LocalStageVars,
) -> Result<(Var, Var)> {
    let mixed = match vars.structure {
        Structure::Full | Structure::LocalOnly => gated_cnn_1d(tape, chunk, valid, &vars.cnn)?,
        Structure::Reversed => {
            let bm = vars.bimamba.as_ref().ok_or_else(|| {
                Error::Usage("reversed structure needs scan parameters in the local stage".into())
            })?;
            bimamba2(tape, chunk, bm)?
        }
        Structure::GlobalOnly => chunk,
    };
    gated_attention(tape, mixed, valid, &vars.attn)
}

// ── global stage ─────────────────────────────────────────────────────

/// Mix the token sequence, pool it, and project to outputs.
/// Returns rank-1 logits and the `[M]` global attention weights.
pub fn global_stage(
    tape: &mut Tape,
    tokens: Var,
    vars: &GlobalStageVars,
) -> Result<(Var, Var)> {
    let (m, _) = tape.value(tokens).dims2()?;
    let mixed = match vars.structure {
        Structure::Full | Structure::GlobalOnly => {
            let bm = vars.bimamba.as_ref().ok_or_else(|| {
                Error::Usage("structure needs scan parameters in the global stage".into())
            })?;
            bimamba2(tape, tokens, bm)?
        }
        Structure::LocalOnly => tokens,
        Structure::Reversed => {
            let cnn = vars.cnn.as_ref().ok_or_else(|| {
                Error::Usage("reversed structure needs CNN parameters in the global stage".into())
            })?;
            gated_cnn_1d(tape, tokens, m, cnn)?
        }
    };
    let (pooled, weights) = gated_attention(tape, mixed, m, &vars.attn)?;
    let logits = tape.matmul(pooled, vars.head)?;
    let logits = tape.reshape(logits, &[vars.dims.num_outputs])?;
    Ok((logits, weights))
}

// ── parallel (training) path ─────────────────────────────────────────

pub struct TrainForward {
    pub logits: Var,
    /// Per-chunk local attention weights, each `[L]`.
    pub local_weights: Vec<Var>,
    /// Valid tile count per chunk.
    pub chunk_valid: Vec<usize>,
    /// `[M]` global attention weights.
    pub global_weights: Var,
}

/// Parallel forward over all chunks of an (already ordered) tile sequence.
/// The last chunk is zero-padded to the chunk length with a validity mask.
pub fn forward_train(tape: &mut Tape, vars: &ModelVars, x: &Tensor) -> Result<TrainForward> {
    let (n, _) = checked_input(x, &vars.dims)?;
    forward_train_masked(tape, vars, x, n)
}

/// Like [`forward_train`] but with an explicit valid-tile count; rows at
/// index >= `n_valid` are treated as padding everywhere. `x` must hold a
/// whole number of chunks' worth of rows when `n_valid < rows`.
pub fn forward_train_masked(
    tape: &mut Tape,
    vars: &ModelVars,
    x: &Tensor,
    n_valid: usize,
) -> Result<TrainForward> {
    let (n, d) = checked_input(x, &vars.dims)?;
    if n_valid == 0 || n_valid > n {
        return Err(Error::Usage(format!("n_valid {n_valid} outside 1..={n}")));
    }

    if vars.structure == Structure::GlobalOnly {
        // Every tile is a token; no local compression.
        let tokens = tape.input(slice_rows(x, 0, n_valid, d, n_valid));
        let (logits, gw) = global_stage(tape, tokens, &vars.global)?;
        return Ok(TrainForward {
            logits,
            local_weights: Vec::new(),
            chunk_valid: Vec::new(),
            global_weights: gw,
        });
    }

    let l = vars.dims.chunk_len;
    let m = n_valid.div_ceil(l);
    let mut tokens = Vec::with_capacity(m);
    let mut local_weights = Vec::with_capacity(m);
    let mut chunk_valid = Vec::with_capacity(m);
    for k in 0..m {
        let start = k * l;
        let valid = (n_valid - start).min(l);
        let rows_available = (n - start).min(l);
        let chunk = slice_rows(x, start, rows_available, d, l);
        let cv = tape.input(chunk);
        let (token, weights) = local_token(tape, cv, valid, &vars.local)?;
        tokens.push(token);
        local_weights.push(weights);
        chunk_valid.push(valid);
    }
    let t_local = tape.concat_rows(&tokens)?;
    let (logits, global_weights) = global_stage(tape, t_local, &vars.global)?;
    Ok(TrainForward { logits, local_weights, chunk_valid, global_weights })
}

fn checked_input(x: &Tensor, dims: &ModelDims) -> Result<(usize, usize)> {
    let (n, d) = x.dims2()?;
    if n == 0 {
        return Err(Error::EmptyBag);
    }
    if d != dims.feature_dim {
        return Err(Error::shape("forward", format!("feature dim {d} vs model {}", dims.feature_dim)));
    }
    Ok((n, d))
}

/// Copy `count` rows starting at `start` into a `target_rows`-row tensor,
/// zero-padding the remainder.
fn slice_rows(x: &Tensor, start: usize, count: usize, d: usize, target_rows: usize) -> Tensor {
    let mut data = vec![0.0; target_rows * d];
    data[..count * d].copy_from_slice(&x.data()[start * d..(start + count) * d]);
    Tensor::new(vec![target_rows, d], data).expect("chunk shape")
}

// ── streaming (inference) path ───────────────────────────────────────

/// Ledgers for the two stages of a streaming pass.
pub struct EngineLedgers {
    pub local: Rc<MemoryLedger>,
    pub global: Rc<MemoryLedger>,
}

impl EngineLedgers {
    pub fn new() -> Self {
        EngineLedgers { local: MemoryLedger::new(), global: MemoryLedger::new() }
    }
}

impl Default for EngineLedgers {
    fn default() -> Self {
        Self::new()
    }
}

pub struct StreamOutput {
    pub logits: Tensor,
    /// `[M]` global attention weights.
    pub global_weights: Tensor,
    /// Per-chunk local weights, only when requested.
    pub local_weights: Option<Vec<Tensor>>,
    pub chunk_valid: Vec<usize>,
    /// Bytes of retained representative tokens right before the global
    /// stage ran: exactly `ceil(N/L) * D * 8` for chunked structures.
    pub tokens_bytes: u64,
}

/// Chunk-and-accumulate streaming forward. `chunks` yields ordered tile
/// blocks of at most `chunk_len` rows (all full except possibly the last);
/// mini-batches of `b_inf` chunks run the local stage on a throwaway tape
/// whose intermediates are dropped after the representative tokens are
/// copied out.
pub fn forward_stream(
    chunks: impl Iterator<Item = Result<Tensor>>,
    params: &ModelParams,
    b_inf: usize,
    ledgers: Option<&EngineLedgers>,
    collect_local_weights: bool,
) -> Result<StreamOutput> {
    if b_inf == 0 {
        return Err(Error::Config("streaming mini-batch must hold at least one chunk".into()));
    }
    let dims = params.dims;
    let l = dims.chunk_len;
    let d = dims.feature_dim;

    let mut token_data: Vec<f64> = Vec::new();
    let mut chunk_valid = Vec::new();
    let mut local_weights = if collect_local_weights { Some(Vec::new()) } else { None };

    let mut pending: Vec<(Tensor, usize)> = Vec::with_capacity(b_inf);
    let mut chunks = chunks.peekable();
    let global_only = params.structure == Structure::GlobalOnly;

    while chunks.peek().is_some() || !pending.is_empty() {
        // Fill one mini-batch.
        while pending.len() < b_inf {
            match chunks.next() {
                Some(chunk) => {
                    let chunk = chunk?;
                    let (rows, cd) = chunk.dims2()?;
                    if cd != d {
                        return Err(Error::shape("forward_stream", format!("chunk width {cd} vs feature dim {d}")));
                    }
                    if rows == 0 || rows > l {
                        return Err(Error::shape("forward_stream", format!("chunk of {rows} rows vs chunk length {l}")));
                    }
                    // Pad partial chunks to the fixed chunk length.
                    let padded = if rows < l && !global_only {
                        slice_rows(&chunk, 0, rows, d, l)
                    } else {
                        chunk
                    };
                    pending.push((padded, rows));
                }
                None => break,
            }
        }
        if pending.is_empty() {
            break;
        }

        // Local stage for this mini-batch on a throwaway tape.
        let mut tape = match ledgers {
            Some(led) => Tape::with_ledger(false, led.local.clone()),
            None => Tape::new(false),
        };
        if global_only {
            // No compression: every tile row is retained as a token.
            for (chunk, rows) in pending.drain(..) {
                if let Some(led) = ledgers {
                    led.global.record("token_accum", (rows * d * 8) as i64);
                }
                token_data.extend_from_slice(&chunk.data()[..rows * d]);
                chunk_valid.push(rows);
            }
            drop(tape);
            continue;
        }
        let local_vars = params.bind_local(&mut tape);
        for (chunk, valid) in pending.drain(..) {
            let cv = tape.input(chunk);
            let (token, weights) = local_token(&mut tape, cv, valid, &local_vars)?;
            if let Some(led) = ledgers {
                led.global.record("token_accum", (d * 8) as i64);
            }
            token_data.extend_from_slice(tape.value(token).data());
            chunk_valid.push(valid);
            if let Some(ws) = &mut local_weights {
                let w = tape.value(weights).clone();
                if let Some(led) = ledgers {
                    led.global.record("attn_weights", w.byte_size() as i64);
                }
                ws.push(w);
            }
        }
        // Tape drops here; the mini-batch's intermediates are released.
    }

    if token_data.is_empty() {
        return Err(Error::EmptyBag);
    }
    let tokens_bytes = match ledgers {
        Some(led) => led.global.live_bytes(),
        None => (token_data.len() * 8) as u64,
    };

    // Global stage: materialize the token sequence and finish on one tape.
    let m = token_data.len() / d;
    let t_global = Tensor::new(vec![m, d], token_data)?;
    if let Some(led) = ledgers {
        // Ownership of the accumulated buffer moves onto the global tape.
        led.global.record("token_accum_move", -((m * d * 8) as i64));
    }
    let mut tape = match ledgers {
        Some(led) => Tape::with_ledger(false, led.global.clone()),
        None => Tape::new(false),
    };
    let global_vars = params.bind_global(&mut tape);
    let tokens = tape.input(t_global);
    let (logits, gw) = global_stage(&mut tape, tokens, &global_vars)?;
    Ok(StreamOutput {
        logits: tape.value(logits).clone(),
        global_weights: tape.value(gw).clone(),
        local_weights,
        chunk_valid,
        tokens_bytes,
    })
}

/// Iterator adapter turning an ordered feature matrix into chunk tensors.
pub fn chunk_iter<'a>(
    x: &'a Tensor,
    chunk_len: usize,
) -> impl Iterator<Item = Result<Tensor>> + 'a {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    (0..n.div_ceil(chunk_len)).map(move |k| {
        let start = k * chunk_len;
        let rows = (n - start).min(chunk_len);
        Ok(slice_rows(x, start, rows, d, rows))
    })
}

// ── memory report ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MemoryRow {
    pub n: usize,
    pub local_peak: u64,
    pub global_peak: u64,
    /// Live bytes of retained tokens at the end of streaming.
    pub tokens_bytes: u64,
}

/// Stream synthetic slides of the given sizes and report per-stage peaks.
/// Chunk contents are synthesized lazily, so only the engine's own
/// allocations are measured.
pub fn peak_memory_report(ns: &[usize], params: &ModelParams, b_inf: usize) -> Result<Vec<MemoryRow>> {
    let d = params.dims.feature_dim;
    let l = params.dims.chunk_len;
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        if n == 0 {
            return Err(Error::EmptyBag);
        }
        let ledgers = EngineLedgers::new();
        let m = n.div_ceil(l);
        let chunks = (0..m).map(move |k| {
            let rows = (n - k * l).min(l);
            Ok(Tensor::from_fn(&[rows, d], |i| ((k * 31 + i) % 17) as f64 * 0.05 - 0.4))
        });
        let _ = forward_stream(chunks, params, b_inf, Some(&ledgers), false)?;
        rows.push(MemoryRow {
            n,
            local_peak: ledgers.local.peak_bytes(),
            global_peak: ledgers.global.peak_bytes(),
            tokens_bytes: ledgers.global.events().iter().fold(0i64, |acc, e| {
                if e.op == "token_accum" { acc + e.delta } else { acc }
            }) as u64,
        });
    }
    Ok(rows)
}

pub fn write_memory_report_csv(w: &mut impl Write, rows: &[MemoryRow]) -> Result<()> {
    writeln!(w, "n,stage,peak_bytes")?;
    for r in rows {
        writeln!(w, "{},local,{}", r.n, r.local_peak)?;
        writeln!(w, "{},global,{}", r.n, r.global_peak)?;
        writeln!(w, "{},tokens,{}", r.n, r.tokens_bytes)?;
    }
    Ok(())
}

// ── checkpoints ──────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    dims: ModelDims,
    structure: Structure,
    task: TaskKind,
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let meta = CheckpointMeta { dims: params.dims, structure: params.structure, task: params.task };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    w.write_all(&meta_json)?;
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    params.visit(&mut |name, t| entries.push((name, t)));
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        write_tensor(&mut w, t, dtype)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&meta_buf).map_err(|e| Error::Format(e.to_string()))?;
    let mut params = ModelParams::init(meta.dims, meta.structure, meta.task, 0)?;
    let count = read_u32(&mut r)? as usize;
    let mut loaded: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf).map_err(|e| Error::Format(e.to_string()))?;
        loaded.insert(name, read_tensor(&mut r)?);
    }
    let mut missing = Vec::new();
    params.visit_mut(&mut |name, t| match loaded.remove(&name) {
        Some(saved) if saved.shape() == t.shape() => *t = saved,
        Some(saved) => missing.push(format!("{name}: shape {:?} vs {:?}", saved.shape(), t.shape())),
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!("checkpoint mismatch: {}", missing.join("; "))));
    }
    Ok(params)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
