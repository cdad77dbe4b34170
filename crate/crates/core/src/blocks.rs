//! Neural building blocks: the 1D gated CNN token mixer, gated attention
//! pooling, and the bidirectional selective-scan block.
//!
//! Parameter structs own plain tensors; [`bind`]-style methods register them
//! on a tape and return lightweight handle structs the forward functions
//! consume. Blocks are pure given their parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

fn fan_in_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-bound..bound))
}

// ── layer norm ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn init(d: usize) -> Self {
        LayerNormParams { gain: Tensor::filled(&[d], 1.0), bias: Tensor::zeros(&[d]) }
    }

    pub fn bind(&self, tape: &mut Tape) -> LayerNormVars {
        LayerNormVars { gain: tape.input(self.gain.clone()), bias: tape.input(self.bias.clone()) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

pub fn layer_norm(tape: &mut Tape, x: Var, p: &LayerNormVars) -> Result<Var> {
    tape.layer_norm(x, p.gain, p.bias, LN_EPS)
}

// ── 1D gated CNN ─────────────────────────────────────────────────────

/// Gated CNN block weights. The input projection expands `D` into three
/// channel groups (gate, pass, conv); the gate width must equal
/// `pass + conv` so the gate multiplies the concatenated branch.
#[derive(Debug, Clone)]
pub struct GatedCnnParams {
    pub ln: LayerNormParams,
    /// `[D × (d_gate + d_pass + d_conv)]`
    pub w_in: Tensor,
    /// `[K × d_conv]`, K odd.
    pub conv_kernel: Tensor,
    /// `[(d_pass + d_conv) × D]`
    pub w_out: Tensor,
    pub d_gate: usize,
    pub d_pass: usize,
    pub d_conv: usize,
}

impl GatedCnnParams {
    pub fn init(d: usize, d_pass: usize, d_conv: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("conv kernel must be odd, got {kernel}")));
        }
        let d_gate = d_pass + d_conv;
        Ok(GatedCnnParams {
            ln: LayerNormParams::init(d),
            w_in: fan_in_uniform(d, d_gate + d_pass + d_conv, rng),
            conv_kernel: fan_in_uniform(kernel, d_conv, rng),
            // Zero so the block starts as the identity plus residual.
            w_out: Tensor::zeros(&[d_pass + d_conv, d]),
            d_gate,
            d_pass,
            d_conv,
        })
    }

    pub fn check(&self, d: usize) -> Result<()> {
        if self.d_gate != self.d_pass + self.d_conv {
            return Err(Error::Config(format!(
                "gate width {} must equal pass {} + conv {}",
                self.d_gate, self.d_pass, self.d_conv
            )));
        }
        let total = self.d_gate + self.d_pass + self.d_conv;
        if self.w_in.shape() != [d, total] {
            return Err(Error::shape("gated_cnn", format!("w_in {:?} vs [{d}, {total}]", self.w_in.shape())));
        }
        if self.w_out.shape() != [self.d_pass + self.d_conv, d] {
            return Err(Error::shape("gated_cnn", format!("w_out {:?}", self.w_out.shape())));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> GatedCnnVars {
        GatedCnnVars {
            ln: self.ln.bind(tape),
            w_in: tape.input(self.w_in.clone()),
            conv_kernel: tape.input(self.conv_kernel.clone()),
            w_out: tape.input(self.w_out.clone()),
            d_gate: self.d_gate,
            d_pass: self.d_pass,
            d_conv: self.d_conv,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        self.ln.visit(&format!("{prefix}.ln"), f);
        f(format!("{prefix}.w_in"), &self.w_in);
        f(format!("{prefix}.conv_kernel"), &self.conv_kernel);
        f(format!("{prefix}.w_out"), &self.w_out);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        self.ln.visit_mut(&format!("{prefix}.ln"), f);
        f(format!("{prefix}.w_in"), &mut self.w_in);
        f(format!("{prefix}.conv_kernel"), &mut self.conv_kernel);
        f(format!("{prefix}.w_out"), &mut self.w_out);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GatedCnnVars {
    pub ln: LayerNormVars,
    pub w_in: Var,
    pub conv_kernel: Var,
    pub w_out: Var,
    pub d_gate: usize,
    pub d_pass: usize,
    pub d_conv: usize,
}

/// Token mixing within one chunk:
///
/// ```text
///   (gate, pass, conv) = Split(Linear_in(LayerNorm(chunk)))
///   out = Linear_out( GELU(gate) ⊙ Concat(pass, DWConv(conv)) ) + chunk
/// ```
///
/// Rows at index >= `valid` are padding; the convolution treats them as
/// zero so a partial chunk behaves exactly like a shorter sequence.
pub fn gated_cnn_1d(tape: &mut Tape, chunk: Var, valid: usize, p: &GatedCnnVars) -> Result<Var> {
    let normed = layer_norm(tape, chunk, &p.ln)?;
    let projected = tape.matmul(normed, p.w_in)?;
    let parts = tape.split_cols(projected, &[p.d_gate, p.d_pass, p.d_conv])?;
    let gate = tape.gelu(parts[0])?;
    let conv = tape.dw_conv1d(parts[2], p.conv_kernel, valid)?;
    let mixed = tape.concat_cols(&[parts[1], conv])?;
    let gated = tape.mul(gate, mixed)?;
    let out = tape.matmul(gated, p.w_out)?;
    tape.add(out, chunk)
}

// ── gated attention pooling ──────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GatedAttnParams {
    /// `[D × d_attn]` tanh branch.
    pub v: Tensor,
    /// `[D × d_attn]` sigmoid gate branch.
    pub u: Tensor,
    /// `[d_attn × 1]` score head.
    pub w: Tensor,
}

impl GatedAttnParams {
    pub fn init(d: usize, d_attn: usize, rng: &mut ChaCha8Rng) -> Self {
        GatedAttnParams {
            v: fan_in_uniform(d, d_attn, rng),
            u: fan_in_uniform(d, d_attn, rng),
            w: fan_in_uniform(d_attn, 1, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> GatedAttnVars {
        GatedAttnVars {
            v: tape.input(self.v.clone()),
            u: tape.input(self.u.clone()),
            w: tape.input(self.w.clone()),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.v"), &self.v);
        f(format!("{prefix}.u"), &self.u);
        f(format!("{prefix}.w"), &self.w);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.v"), &mut self.v);
        f(format!("{prefix}.u"), &mut self.u);
        f(format!("{prefix}.w"), &mut self.w);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GatedAttnVars {
    pub v: Var,
    pub u: Var,
    pub w: Var,
}

/// Pool a token set to one vector with tanh ⊙ sigmoid gated attention.
/// Positions >= `valid` receive weight exactly zero. Returns the pooled
/// `[1×D]` vector and the `[L]` weight vector (exported for heatmaps).
pub fn gated_attention(
    tape: &mut Tape,
    tokens: Var,
    valid: usize,
    p: &GatedAttnVars,
) -> Result<(Var, Var)> {
    let (l, _d) = tape.value(tokens).dims2()?;
    let tanh_branch = {
        let z = tape.matmul(tokens, p.v)?;
        tape.tanh(z)?
    };
    let gate_branch = {
        let z = tape.matmul(tokens, p.u)?;
        tape.sigmoid(z)?
    };
    let gated = tape.mul(tanh_branch, gate_branch)?;
    let scores = tape.matmul(gated, p.w)?;
    let scores = tape.reshape(scores, &[l])?;
    let weights = tape.softmax_masked(scores, valid.min(l).max(1))?;
    let row = tape.reshape(weights, &[1, l])?;
    let pooled = tape.matmul(row, tokens)?;
    Ok((pooled, weights))
}

// ── selective state-space scan ───────────────────────────────────────

/// Parameters of one scan direction: in/out projections, input-dependent
/// (Δ, B, C) heads, a learned scalar decay base, and a per-channel skip.
#[derive(Debug, Clone)]
pub struct SsmParams {
    /// `[D × d_inner]`
    pub w_in: Tensor,
    /// `[D × d_state]`
    pub w_b: Tensor,
    /// `[D × d_state]`
    pub w_c: Tensor,
    /// `[D × 1]`
    pub w_delta: Tensor,
    /// `[1]`, added to the Δ projection before softplus.
    pub delta_bias: Tensor,
    /// `[1]`, decay base before softplus.
    pub decay: Tensor,
    /// `[d_inner]` skip connection.
    pub skip: Tensor,
    /// `[d_inner × D]`
    pub w_out: Tensor,
    pub d_state: usize,
}

impl SsmParams {
    pub fn init(d: usize, d_inner: usize, d_state: usize, rng: &mut ChaCha8Rng) -> Self {
        SsmParams {
            w_in: fan_in_uniform(d, d_inner, rng),
            w_b: fan_in_uniform(d, d_state, rng),
            w_c: fan_in_uniform(d, d_state, rng),
            w_delta: fan_in_uniform(d, 1, rng),
            // softplus(-0.433) ≈ 0.5, softplus(0.541) ≈ 1.0
            delta_bias: Tensor::new(vec![1], vec![-0.433]).unwrap(),
            decay: Tensor::new(vec![1], vec![0.541]).unwrap(),
            skip: Tensor::filled(&[d_inner], 1.0),
            // Zero so the scan starts silent inside its residual block.
            w_out: Tensor::zeros(&[d_inner, d]),
            d_state,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> SsmVars {
        SsmVars {
            w_in: tape.input(self.w_in.clone()),
            w_b: tape.input(self.w_b.clone()),
            w_c: tape.input(self.w_c.clone()),
            w_delta: tape.input(self.w_delta.clone()),
            delta_bias: tape.input(self.delta_bias.clone()),
            decay: tape.input(self.decay.clone()),
            skip: tape.input(self.skip.clone()),
            w_out: tape.input(self.w_out.clone()),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w_in"), &self.w_in);
        f(format!("{prefix}.w_b"), &self.w_b);
        f(format!("{prefix}.w_c"), &self.w_c);
        f(format!("{prefix}.w_delta"), &self.w_delta);
        f(format!("{prefix}.delta_bias"), &self.delta_bias);
        f(format!("{prefix}.decay"), &self.decay);
        f(format!("{prefix}.skip"), &self.skip);
        f(format!("{prefix}.w_out"), &self.w_out);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_in"), &mut self.w_in);
        f(format!("{prefix}.w_b"), &mut self.w_b);
        f(format!("{prefix}.w_c"), &mut self.w_c);
        f(format!("{prefix}.w_delta"), &mut self.w_delta);
        f(format!("{prefix}.delta_bias"), &mut self.delta_bias);
        f(format!("{prefix}.decay"), &mut self.decay);
        f(format!("{prefix}.skip"), &mut self.skip);
        f(format!("{prefix}.w_out"), &mut self.w_out);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SsmVars {
    pub w_in: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub w_delta: Var,
    pub delta_bias: Var,
    pub decay: Var,
    pub skip: Var,
    pub w_out: Var,
}

/// Causal selective scan over a sequence: input-dependent (Δ, B, C) with a
/// learned positive scalar decay base, plus a skip term and an output
/// projection. Linear time, constant state in the sequence length.
pub fn ssm_scan(tape: &mut Tape, seq: Var, p: &SsmVars) -> Result<Var> {
    let (m, _d) = tape.value(seq).dims2()?;
    let x = tape.matmul(seq, p.w_in)?;
    let dt = {
        let raw = tape.matmul(seq, p.w_delta)?;
        let biased = tape.add_row_bias(raw, p.delta_bias)?;
        let positive = tape.softplus(biased)?;
        tape.reshape(positive, &[m])?
    };
    let b = tape.matmul(seq, p.w_b)?;
    let c = tape.matmul(seq, p.w_c)?;
    let decay = tape.softplus(p.decay)?;
    let scanned = tape.ssm_recurrence(x, dt, b, c, decay)?;
    let skip = tape.mul_row_broadcast(x, p.skip)?;
    let with_skip = tape.add(scanned, skip)?;
    tape.matmul(with_skip, p.w_out)
}

// ── bidirectional wrapper ────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BiMambaParams {
    pub fwd: SsmParams,
    pub bwd: SsmParams,
    pub ln_pre: LayerNormParams,
    pub ln_post: LayerNormParams,
}

impl BiMambaParams {
    pub fn init(d: usize, d_inner: usize, d_state: usize, rng: &mut ChaCha8Rng) -> Self {
        BiMambaParams {
            fwd: SsmParams::init(d, d_inner, d_state, rng),
            bwd: SsmParams::init(d, d_inner, d_state, rng),
            ln_pre: LayerNormParams::init(d),
            ln_post: LayerNormParams::init(d),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BiMambaVars {
        BiMambaVars {
            fwd: self.fwd.bind(tape),
            bwd: self.bwd.bind(tape),
            ln_pre: self.ln_pre.bind(tape),
            ln_post: self.ln_post.bind(tape),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        self.fwd.visit(&format!("{prefix}.fwd"), f);
        self.bwd.visit(&format!("{prefix}.bwd"), f);
        self.ln_pre.visit(&format!("{prefix}.ln_pre"), f);
        self.ln_post.visit(&format!("{prefix}.ln_post"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        self.fwd.visit_mut(&format!("{prefix}.fwd"), f);
        self.bwd.visit_mut(&format!("{prefix}.bwd"), f);
        self.ln_pre.visit_mut(&format!("{prefix}.ln_pre"), f);
        self.ln_post.visit_mut(&format!("{prefix}.ln_post"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BiMambaVars {
    pub fwd: SsmVars,
    pub bwd: SsmVars,
    pub ln_pre: LayerNormVars,
    pub ln_post: LayerNormVars,
}

/// Two opposite-direction scans around a residual:
///
/// ```text
///   T̂ = LayerNorm(T)
///   out = LayerNorm(T + Scan(T̂) + Flip(Scan(Flip(T̂))))
/// ```
pub fn bimamba2(tape: &mut Tape, tokens: Var, p: &BiMambaVars) -> Result<Var> {
    let normed = layer_norm(tape, tokens, &p.ln_pre)?;
    let h_fwd = ssm_scan(tape, normed, &p.fwd)?;
    let flipped = tape.flip_rows(normed)?;
    let h_bwd_rev = ssm_scan(tape, flipped, &p.bwd)?;
    let h_bwd = tape.flip_rows(h_bwd_rev)?;
    let sum = tape.add(tokens, h_fwd)?;
    let sum = tape.add(sum, h_bwd)?;
    layer_norm(tape, sum, &p.ln_post)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Straight-line scalar layer norm used by the oracles below.
    fn ln_rows(x: &[f64], rows: usize, d: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * gain[j] + bias[j];
            }
        }
        out
    }

    #[test]
    fn gated_cnn_zero_out_projection_is_identity() {
        let mut r = rng(1);
        let (d, l) = (6, 5);
        let mut params = GatedCnnParams::init(d, 3, 3, 3, &mut r).unwrap();
        params.w_out = Tensor::zeros(&[6, d]);
        let mut tape = Tape::new(false);
        let pv = params.bind(&mut tape);
        let chunk = tape.input(random_tensor(&[l, d], &mut r));
        let out = gated_cnn_1d(&mut tape, chunk, l, &pv).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(chunk).data());
    }

    #[test]
    fn gated_cnn_single_row_chunk() {
        let mut r = rng(2);
        let d = 4;
        let mut params = GatedCnnParams::init(d, 2, 2, 3, &mut r).unwrap();
        params.w_out = random_tensor(&[4, d], &mut r);
        let mut tape = Tape::new(false);
        let pv = params.bind(&mut tape);
        let chunk = tape.input(random_tensor(&[1, d], &mut r));
        let out = gated_cnn_1d(&mut tape, chunk, 1, &pv).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, d]);
        assert!(tape.value(out).is_finite());
    }

    #[test]
    fn gated_cnn_matches_scalar_oracle() {
        // D=2, L=3, toy widths d_gate=2, d_pass=1, d_conv=1, K=3.
        let mut r = rng(3);
        let (d, l, k) = (2usize, 3usize, 3usize);
        let mut params = GatedCnnParams::init(d, 1, 1, k, &mut r).unwrap();
        params.w_out = random_tensor(&[2, d], &mut r);
        let x = random_tensor(&[l, d], &mut r);

        let mut tape = Tape::new(false);
        let pv = params.bind(&mut tape);
        let chunk = tape.input(x.clone());
        let out = gated_cnn_1d(&mut tape, chunk, l, &pv).unwrap();

        // Independent straight-line evaluation.
        let normed = ln_rows(x.data(), l, d, params.ln.gain.data(), params.ln.bias.data());
        let total = 4; // d_gate + d_pass + d_conv
        let mut z = vec![0.0; l * total];
        for row in 0..l {
            for j in 0..total {
                let mut acc = 0.0;
                for t in 0..d {
                    acc += normed[row * d + t] * params.w_in.data()[t * total + j];
                }
                z[row * total + j] = acc;
            }
        }
        let mut expected = vec![0.0; l * d];
        for row in 0..l {
            // columns: gate = z[0..2], pass = z[2], conv input = z[3]
            let mut conv = 0.0;
            for t in 0..k {
                let s = row as isize + t as isize - 1;
                if s >= 0 && (s as usize) < l {
                    conv += params.conv_kernel.data()[t] * z[s as usize * total + 3];
                }
            }
            let g0 = 0.5 * z[row * total] * (1.0 + libm::erf(z[row * total] / 2.0f64.sqrt()));
            let g1 = 0.5 * z[row * total + 1] * (1.0 + libm::erf(z[row * total + 1] / 2.0f64.sqrt()));
            let mixed = [g0 * z[row * total + 2], g1 * conv];
            for j in 0..d {
                let mut acc = 0.0;
                for t in 0..2 {
                    acc += mixed[t] * params.w_out.data()[t * d + j];
                }
                expected[row * d + j] = acc + x.data()[row * d + j];
            }
        }
        for (got, want) in tape.value(out).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn attention_singleton_pools_identity() {
        let mut r = rng(4);
        let d = 5;
        let params = GatedAttnParams::init(d, 3, &mut r);
        let mut tape = Tape::new(false);
        let pv = params.bind(&mut tape);
        let tokens = tape.input(random_tensor(&[1, d], &mut r));
        let (pooled, weights) = gated_attention(&mut tape, tokens, 1, &pv).unwrap();
        assert_eq!(tape.value(weights).data(), &[1.0]);
        assert_eq!(tape.value(pooled).data(), tape.value(tokens).data());
    }

    #[test]
    fn attention_uniform_on_identical_tokens() {
        let mut r = rng(5);
        let (l, d) = (6, 4);
        let params = GatedAttnParams::init(d, 2, &mut r);
        let row = random_tensor(&[1, d], &mut r);
        let tokens = Tensor::from_fn(&[l, d], |i| row.data()[i % d]);
        let mut tape = Tape::new(false);
        let pv = params.bind(&mut tape);
        let tv = tape.input(tokens);
        let (_, weights) = gated_attention(&mut tape, tv, l, &pv).unwrap();
        for w in tape.value(weights).data() {
            assert!((w - 1.0 / l as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_scalar_oracle() {
        let mut r = rng(6);
        let (l, d, da) = (2usize, 2usize, 2usize);
        let params = GatedAttnParams::init(d, da, &mut r);
        let tokens = random_tensor(&[l, d], &mut r);

        let mut tape = Tape::new(false);
        let pv = params.bind(&mut tape);
        let tv = tape.input(tokens.clone());
        let (pooled, weights) = gated_attention(&mut tape, tv, l, &pv).unwrap();

        let mut scores = [0.0; 2];
        for i in 0..l {
            let mut s = 0.0;
            for a in 0..da {
                let mut tv_ = 0.0;
                let mut tu = 0.0;
                for j in 0..d {
                    tv_ += tokens.data()[i * d + j] * params.v.data()[j * da + a];
                    tu += tokens.data()[i * d + j] * params.u.data()[j * da + a];
                }
                let sig = 1.0 / (1.0 + (-tu).exp());
                s += tv_.tanh() * sig * params.w.data()[a];
            }
            scores[i] = s;
        }
        let m = scores[0].max(scores[1]);
        let e = [(scores[0] - m).exp(), (scores[1] - m).exp()];
        let z = e[0] + e[1];
        let a = [e[0] / z, e[1] / z];
        for i in 0..l {
            assert!((tape.value(weights).data()[i] - a[i]).abs() < 1e-12);
        }
        for j in 0..d {
            let want = a[0] * tokens.data()[j] + a[1] * tokens.data()[d + j];
            assert!((tape.value(pooled).data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_normalized_and_permutation_consistent() {
        let mut r = rng(7);
        let (l, d) = (7, 4);
        let params = GatedAttnParams::init(d, 2, &mut r);
        let tokens = random_tensor(&[l, d], &mut r);

        let run = |t: &Tensor| {
            let mut tape = Tape::new(false);
            let pv = params.bind(&mut tape);
            let tv = tape.input(t.clone());
            let (pooled, weights) = gated_attention(&mut tape, tv, l, &pv).unwrap();
            (tape.value(pooled).data().to_vec(), tape.value(weights).data().to_vec())
        };
        let (pooled, weights) = run(&tokens);
        let sum: f64 = weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(weights.iter().all(|w| *w >= 0.0));

        // Rotate rows by 3: weights rotate with tokens, pooled is unchanged.
        let rot = 3;
        let rotated = Tensor::from_fn(&[l, d], |i| {
            let (row, col) = (i / d, i % d);
            tokens.data()[((row + rot) % l) * d + col]
        });
        let (pooled2, weights2) = run(&rotated);
        for i in 0..l {
            assert!((weights2[i] - weights[(i + rot) % l]).abs() < 1e-12);
        }
        for j in 0..d {
            assert!((pooled[j] - pooled2[j]).abs() < 1e-10);
        }
    }

    /// Unrolled O(M^2) oracle for the full scan block.
    fn ssm_oracle(seq: &Tensor, p: &SsmParams, d_inner: usize) -> Vec<f64> {
        let (m, d) = seq.dims2().unwrap();
        let s = p.d_state;
        let matvec = |w: &Tensor, row: &[f64], cols: usize| -> Vec<f64> {
            let mut out = vec![0.0; cols];
            for (t, &rv) in row.iter().enumerate() {
                for j in 0..cols {
                    out[j] += rv * w.data()[t * cols + j];
                }
            }
            out
        };
        let softplus = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
        let a = softplus(p.decay.data()[0]);
        let mut xs = Vec::new();
        let mut dts = Vec::new();
        let mut bs = Vec::new();
        let mut cs = Vec::new();
        for t in 0..m {
            let row = &seq.data()[t * d..(t + 1) * d];
            xs.push(matvec(&p.w_in, row, d_inner));
            dts.push(softplus(matvec(&p.w_delta, row, 1)[0] + p.delta_bias.data()[0]));
            bs.push(matvec(&p.w_b, row, s));
            cs.push(matvec(&p.w_c, row, s));
        }
        let mut out = vec![0.0; m * d];
        for t in 0..m {
            // y_t = C_t^T sum_{u<=t} (prod_{r=u+1..t} abar_r) dt_u B_u x_u^T + skip*x_t
            let mut y = vec![0.0; d_inner];
            for u in 0..=t {
                let mut decay_prod = 1.0;
                for r in u + 1..=t {
                    decay_prod *= (-dts[r] * a).exp();
                }
                let cb: f64 = (0..s).map(|si| cs[t][si] * bs[u][si]).sum();
                let w = decay_prod * dts[u] * cb;
                for pi in 0..d_inner {
                    y[pi] += w * xs[u][pi];
                }
            }
            for pi in 0..d_inner {
                y[pi] += p.skip.data()[pi] * xs[t][pi];
            }
            for j in 0..d {
                let mut acc = 0.0;
                for pi in 0..d_inner {
                    acc += y[pi] * p.w_out.data()[pi * d + j];
                }
                out[t * d + j] = acc;
            }
        }
        out
    }

    fn run_ssm(seq: &Tensor, p: &SsmParams) -> Vec<f64> {
        let mut tape = Tape::new(false);
        let pv = p.bind(&mut tape);
        let sv = tape.input(seq.clone());
        let out = ssm_scan(&mut tape, sv, &pv).unwrap();
        tape.value(out).data().to_vec()
    }

    fn random_ssm(d: usize, d_inner: usize, d_state: usize, r: &mut ChaCha8Rng) -> SsmParams {
        let mut p = SsmParams::init(d, d_inner, d_state, r);
        p.w_out = random_tensor(&[d_inner, d], r);
        p.skip = Tensor::from_fn(&[d_inner], |_| r.gen_range(-1.0..1.0));
        p
    }

    #[test]
    fn ssm_single_step_equals_closed_form() {
        let mut r = rng(8);
        let (d, di, s) = (3, 4, 2);
        let p = random_ssm(d, di, s, &mut r);
        let seq = random_tensor(&[1, d], &mut r);
        let got = run_ssm(&seq, &p);
        let want = ssm_oracle(&seq, &p, di);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn ssm_zero_decay_is_memoryless() {
        let mut r = rng(9);
        let (d, di, s) = (3, 3, 2);
        let mut p = random_ssm(d, di, s, &mut r);
        // Huge decay base: abar underflows to exactly zero.
        p.decay = Tensor::new(vec![1], vec![2000.0]).unwrap();
        let seq = random_tensor(&[5, d], &mut r);
        let out = run_ssm(&seq, &p);
        // Permuting input rows permutes output rows identically.
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = Tensor::from_fn(&[5, d], |i| seq.data()[perm[i / d] * d + i % d]);
        let out_p = run_ssm(&permuted, &p);
        for i in 0..5 {
            for j in 0..d {
                assert_eq!(out_p[i * d + j], out[perm[i] * d + j]);
            }
        }
    }

    #[test]
    fn ssm_matches_unrolled_oracle() {
        let mut r = rng(10);
        let (d, di, s) = (4, 5, 3);
        for case in 0..10 {
            let p = random_ssm(d, di, s, &mut r);
            let m = 1 + (case * 3) % 16;
            let seq = random_tensor(&[m, d], &mut r);
            let got = run_ssm(&seq, &p);
            let want = ssm_oracle(&seq, &p, di);
            for (g, w) in got.iter().zip(&want) {
                let rel = (g - w).abs() / (w.abs() + 1e-8);
                assert!(rel < 1e-10, "case {case}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn ssm_is_causal() {
        let mut r = rng(11);
        let (d, di, s, m) = (3, 4, 2, 8);
        let p = random_ssm(d, di, s, &mut r);
        let seq = random_tensor(&[m, d], &mut r);
        let base = run_ssm(&seq, &p);
        let t_perturb = 5;
        let mut bumped = seq.clone();
        bumped.data_mut()[t_perturb * d] += 1.0;
        let out = run_ssm(&bumped, &p);
        for t in 0..t_perturb {
            for j in 0..d {
                assert_eq!(out[t * d + j], base[t * d + j], "leak into position {t}");
            }
        }
        assert_ne!(out[t_perturb * d], base[t_perturb * d]);
    }

    fn run_bimamba(tokens: &Tensor, p: &BiMambaParams) -> Vec<f64> {
        let mut tape = Tape::new(false);
        let pv = p.bind(&mut tape);
        let tv = tape.input(tokens.clone());
        let out = bimamba2(&mut tape, tv, &pv).unwrap();
        tape.value(out).data().to_vec()
    }

    fn random_bimamba(d: usize, r: &mut ChaCha8Rng) -> BiMambaParams {
        let mut p = BiMambaParams::init(d, d + 1, 3, r);
        p.fwd = random_ssm(d, d + 1, 3, r);
        p.bwd = random_ssm(d, d + 1, 3, r);
        p.ln_pre.gain = Tensor::from_fn(&[d], |_| r.gen_range(0.5..1.5));
        p.ln_post.bias = Tensor::from_fn(&[d], |_| r.gen_range(-0.3..0.3));
        p
    }

    #[test]
    fn bimamba_zeroed_scans_reduce_to_layer_norm() {
        let mut r = rng(12);
        let d = 4;
        let mut p = random_bimamba(d, &mut r);
        p.fwd.w_out = Tensor::zeros(&[d + 1, d]);
        p.bwd.w_out = Tensor::zeros(&[d + 1, d]);
        let tokens = random_tensor(&[5, d], &mut r);
        let got = run_bimamba(&tokens, &p);
        let want = ln_rows(tokens.data(), 5, d, p.ln_post.gain.data(), p.ln_post.bias.data());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn bimamba_reversal_equivariance() {
        let mut r = rng(13);
        let d = 4;
        let p = random_bimamba(d, &mut r);
        let m = 6;
        let tokens = random_tensor(&[m, d], &mut r);

        let fwd_path = run_bimamba(&tokens, &p);
        let flipped = Tensor::from_fn(&[m, d], |i| tokens.data()[(m - 1 - i / d) * d + i % d]);
        let swapped = BiMambaParams {
            fwd: p.bwd.clone(),
            bwd: p.fwd.clone(),
            ln_pre: p.ln_pre.clone(),
            ln_post: p.ln_post.clone(),
        };
        let rev_path = run_bimamba(&flipped, &swapped);
        for i in 0..m {
            for j in 0..d {
                let a = rev_path[i * d + j];
                let b = fwd_path[(m - 1 - i) * d + j];
                assert!((a - b).abs() < 1e-12, "row {i} col {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn bimamba_single_token() {
        let mut r = rng(14);
        let d = 3;
        let p = random_bimamba(d, &mut r);
        let tokens = random_tensor(&[1, d], &mut r);
        let out = run_bimamba(&tokens, &p);
        assert_eq!(out.len(), d);
        assert!(out.iter().all(|v| v.is_finite()));
    }
}
