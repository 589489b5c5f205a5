//! LSTM policy over decision slots with a critic head, the clipped PPO
//! objective and the packets exchanged with the parameter server.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::AdamState;
use crate::tape::{softmax_in_place, Tape, Var};
use crate::tensor::Matrix;

pub use crate::optim::AdamConfig;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("non-finite logits at slot {0}")]
    NonFiniteLogits(usize),
    #[error("trajectory {0} has no reward")]
    MissingReward(usize),
    #[error("trajectory {0} has a non-finite reward")]
    NonFiniteReward(usize),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A named `rows × cols` slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat controller parameters with their partition map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub arities: Vec<usize>,
    pub hidden: usize,
    pub embed: usize,
    pub blocks: Vec<Block>,
    pub data: Vec<f64>,
}

const EMB: usize = 0;
const WX: usize = 1;
const WH: usize = 2;
const BIAS: usize = 3;
const HEADS: usize = 4;

impl PolicyParams {
    fn layout(arities: &[usize], hidden: usize, embed: usize) -> Vec<Block> {
        let tokens = 1 + arities.iter().sum::<usize>();
        let mut shapes = vec![
            ("embedding".to_string(), tokens, embed),
            ("lstm.wx".to_string(), embed, 4 * hidden),
            ("lstm.wh".to_string(), hidden, 4 * hidden),
            ("lstm.b".to_string(), 1, 4 * hidden),
        ];
        for (k, &a) in arities.iter().enumerate() {
            shapes.push((format!("head{k}.w"), hidden, a));
            shapes.push((format!("head{k}.b"), 1, a));
        }
        shapes.push(("critic.w".to_string(), hidden, 1));
        shapes.push(("critic.b".to_string(), 1, 1));
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let b = Block { name, rows, cols, offset };
                offset += rows * cols;
                b
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn num_slots(&self) -> usize {
        self.arities.len()
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    fn matrix(&self, i: usize) -> Matrix {
        let b = &self.blocks[i];
        Matrix::from_vec(b.rows, b.cols, self.data[b.range()].to_vec())
    }

    /// Index of the token for `choice` at `slot` (token 0 is the start token).
    fn token(&self, slot: usize, choice: usize) -> usize {
        1 + self.arities[..slot].iter().sum::<usize>() + choice
    }

    fn head_block(&self, slot: usize) -> usize {
        HEADS + 2 * slot
    }

    fn critic_block(&self) -> usize {
        HEADS + 2 * self.arities.len()
    }
}

/// Controller size options.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub hidden: usize,
    pub embed: usize,
    /// Weights are drawn from `U(-init_scale, init_scale)`.
    pub init_scale: f64,
}

impl Default for PolicyShape {
    fn default() -> Self {
        Self { hidden: 32, embed: 16, init_scale: 0.1 }
    }
}

pub fn init_policy(arities: &[usize], seed: u64, hidden: usize, embed: usize) -> PolicyParams {
    init_policy_with(arities, seed, PolicyShape { hidden, embed, ..PolicyShape::default() })
}

pub fn init_policy_with(arities: &[usize], seed: u64, shape: PolicyShape) -> PolicyParams {
    let blocks = PolicyParams::layout(arities, shape.hidden, shape.embed);
    let total = blocks.iter().map(Block::len).sum();
    let mut data = vec![0.0; total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = shape.init_scale;
    for b in &blocks {
        if b.rows == 1 && b.name != "embedding" {
            continue;
        }
        for v in &mut data[b.range()] {
            *v = rng.random_range(-s..=s);
        }
    }
    PolicyParams { arities: arities.to_vec(), hidden: shape.hidden, embed: shape.embed, blocks, data }
}

/// One sampled architecture with the quantities PPO needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub encoding: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub reward: Option<f64>,
}

struct TapeNet {
    blocks: Vec<Var>,
}

impl TapeNet {
    fn load(tape: &mut Tape, p: &PolicyParams, trainable: bool) -> Self {
        let blocks = (0..p.blocks.len())
            .map(|i| {
                let m = p.matrix(i);
                if trainable {
                    tape.param(m)
                } else {
                    tape.constant(m)
                }
            })
            .collect();
        Self { blocks }
    }

    /// One LSTM step for every row: returns (h, c).
    fn cell(&self, tape: &mut Tape, p: &PolicyParams, tokens: &[usize], h: Var, c: Var) -> (Var, Var) {
        let hd = p.hidden;
        let x = tape.gather_rows(self.blocks[EMB], tokens);
        let gx = tape.matmul(x, self.blocks[WX]);
        let gh = tape.matmul(h, self.blocks[WH]);
        let z = tape.add(gx, gh);
        let z = tape.add_bias(z, self.blocks[BIAS]);
        let zi = tape.slice_cols(z, 0, hd);
        let zf = tape.slice_cols(z, hd, hd);
        let zg = tape.slice_cols(z, 2 * hd, hd);
        let zo = tape.slice_cols(z, 3 * hd, hd);
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c2 = tape.add(fc, ig);
        let tc = tape.tanh(c2);
        let h2 = tape.mul(o, tc);
        (h2, c2)
    }

    fn head(&self, tape: &mut Tape, p: &PolicyParams, slot: usize, h: Var) -> Var {
        let k = p.head_block(slot);
        let l = tape.matmul(h, self.blocks[k]);
        tape.add_bias(l, self.blocks[k + 1])
    }

    fn critic(&self, tape: &mut Tape, p: &PolicyParams, h: Var) -> Var {
        let k = p.critic_block();
        let v = tape.matmul(h, self.blocks[k]);
        tape.add_bias(v, self.blocks[k + 1])
    }
}

/// Decode `m` architectures autoregressively from the policy.
pub fn sample_batch(policy: &PolicyParams, m: usize, rng: &mut impl Rng) -> Result<Vec<Trajectory>, ControllerError> {
    let t_len = policy.num_slots();
    let mut tape = Tape::new();
    let net = TapeNet::load(&mut tape, policy, false);
    let mut h = tape.constant(Matrix::zeros(m, policy.hidden));
    let mut c = tape.constant(Matrix::zeros(m, policy.hidden));
    let mut trajs: Vec<Trajectory> = (0..m)
        .map(|_| Trajectory {
            encoding: Vec::with_capacity(t_len),
            log_probs: Vec::with_capacity(t_len),
            values: Vec::with_capacity(t_len),
            reward: None,
        })
        .collect();
    let mut tokens = vec![0usize; m];
    for t in 0..t_len {
        (h, c) = net.cell(&mut tape, policy, &tokens, h, c);
        let logits = net.head(&mut tape, policy, t, h);
        let values = net.critic(&mut tape, policy, h);
        let lv = tape.value(logits).clone();
        if !lv.all_finite() {
            return Err(ControllerError::NonFiniteLogits(t));
        }
        for (r, traj) in trajs.iter_mut().enumerate() {
            let mut p = lv.row(r).to_vec();
            softmax_in_place(&mut p);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut a = p.len() - 1;
            for (j, &pj) in p.iter().enumerate() {
                acc += pj;
                if u < acc {
                    a = j;
                    break;
                }
            }
            let lp = if p.len() == 1 { 0.0 } else { p[a].ln() };
            traj.encoding.push(a);
            traj.log_probs.push(lp);
            traj.values.push(tape.value(values).get(r, 0));
            tokens[r] = policy.token(t, a);
        }
    }
    Ok(trajs)
}

/// Per-slot action distributions along a fixed encoding.
pub fn action_probabilities(policy: &PolicyParams, encoding: &[usize]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let net = TapeNet::load(&mut tape, policy, false);
    let mut h = tape.constant(Matrix::zeros(1, policy.hidden));
    let mut c = tape.constant(Matrix::zeros(1, policy.hidden));
    let mut out = Vec::with_capacity(encoding.len());
    let mut token = 0;
    for (t, &a) in encoding.iter().enumerate() {
        (h, c) = net.cell(&mut tape, policy, &[token], h, c);
        let logits = net.head(&mut tape, policy, t, h);
        let mut p = tape.value(logits).row(0).to_vec();
        softmax_in_place(&mut p);
        out.push(p);
        token = policy.token(t, a);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketMode {
    /// `(θ₀ − θ_E) / lr` after `epochs` local SGD passes.
    CumulativeDelta,
    /// Gradient of the first pass only.
    FirstEpochGradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Step size of the local passes.
    pub lr: f64,
    pub mode: PacketMode,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self { clip: 0.2, epochs: 4, value_coef: 0.5, entropy_coef: 0.01, lr: 1e-3, mode: PacketMode::CumulativeDelta }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// Sample estimate of KL(π_old ‖ π_θ).
    pub approx_kl: f64,
}

fn check_rewards(trajs: &[Trajectory]) -> Result<Vec<f64>, ControllerError> {
    trajs
        .iter()
        .enumerate()
        .map(|(i, t)| match t.reward {
            None => Err(ControllerError::MissingReward(i)),
            Some(r) if !r.is_finite() => Err(ControllerError::NonFiniteReward(i)),
            Some(r) => Ok(r),
        })
        .collect()
}

fn build_loss(
    tape: &mut Tape,
    net: &TapeNet,
    policy: &PolicyParams,
    trajs: &[Trajectory],
    rewards: &[f64],
    cfg: &PpoConfig,
) -> Result<(Var, PpoDiagnostics), ControllerError> {
    let b = trajs.len();
    let t_len = policy.num_slots();
    for tr in trajs {
        if tr.encoding.len() != t_len || tr.log_probs.len() != t_len || tr.values.len() != t_len {
            return Err(ControllerError::Shape(format!("trajectory length differs from {t_len} slots")));
        }
    }
    let mut h = tape.constant(Matrix::zeros(b, policy.hidden));
    let mut c = tape.constant(Matrix::zeros(b, policy.hidden));
    let ret = tape.constant(Matrix::from_vec(b, 1, rewards.to_vec()));
    let mut tokens = vec![0usize; b];
    let (mut surr, mut vloss, mut ents) = (Vec::new(), Vec::new(), Vec::new());
    let (mut clipped, mut kl) = (0usize, 0.0);
    for t in 0..t_len {
        (h, c) = net.cell(tape, policy, &tokens, h, c);
        let logits = net.head(tape, policy, t, h);
        let v = net.critic(tape, policy, h);
        let ls = tape.log_softmax(logits);
        let actions: Vec<usize> = trajs.iter().map(|tr| tr.encoding[t]).collect();
        let logp = tape.pick_cols(ls, &actions);
        let old = tape.constant(Matrix::from_vec(b, 1, trajs.iter().map(|tr| tr.log_probs[t]).collect()));
        let adv_data: Vec<f64> = trajs.iter().zip(rewards).map(|(tr, r)| r - tr.values[t]).collect();
        let adv = tape.constant(Matrix::from_vec(b, 1, adv_data));
        let diff = tape.sub(logp, old);
        let ratio = tape.exp(diff);
        for &d in &tape.value(diff).data {
            if (d.exp() - 1.0).abs() > cfg.clip {
                clipped += 1;
            }
            kl -= d;
        }
        let s1 = tape.mul(ratio, adv);
        let rc = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
        let s2 = tape.mul(rc, adv);
        surr.push(tape.minimum(s1, s2));
        let e = tape.sub(ret, v);
        vloss.push(tape.square(e));
        let p = tape.exp(ls);
        let plp = tape.mul(p, ls);
        let neg = tape.row_sum(plp);
        ents.push(tape.scale(neg, -1.0));
        for (r, tr) in trajs.iter().enumerate() {
            tokens[r] = policy.token(t, tr.encoding[t]);
        }
    }
    if t_len == 0 || b == 0 {
        let z = tape.constant(Matrix::scalar(0.0));
        return Ok((z, PpoDiagnostics::default()));
    }
    let s = tape.concat_cols(&surr);
    let s = tape.mean(s);
    let vl = tape.concat_cols(&vloss);
    let vl = tape.mean(vl);
    let en = tape.concat_cols(&ents);
    let en = tape.mean(en);
    let a = tape.scale(s, -1.0);
    let bv = tape.scale(vl, cfg.value_coef);
    let ce = tape.scale(en, -cfg.entropy_coef);
    let l = tape.add(a, bv);
    let l = tape.add(l, ce);
    let n = (b * t_len) as f64;
    let diag = PpoDiagnostics {
        surrogate: tape.value(s).scalar_value(),
        value_loss: tape.value(vl).scalar_value(),
        entropy: tape.value(en).scalar_value(),
        clip_fraction: clipped as f64 / n,
        approx_kl: kl / n,
    };
    Ok((l, diag))
}

/// Clipped PPO loss of the current parameters on recorded trajectories.
pub fn ppo_loss(policy: &PolicyParams, trajs: &[Trajectory], cfg: &PpoConfig) -> Result<(f64, PpoDiagnostics), ControllerError> {
    let rewards = check_rewards(trajs)?;
    let mut tape = Tape::new();
    let net = TapeNet::load(&mut tape, policy, false);
    let (l, d) = build_loss(&mut tape, &net, policy, trajs, &rewards, cfg)?;
    Ok((tape.value(l).scalar_value(), d))
}

/// Loss and its gradient with respect to the flat parameter vector.
pub fn loss_and_gradient(
    policy: &PolicyParams,
    trajs: &[Trajectory],
    cfg: &PpoConfig,
) -> Result<(f64, Vec<f64>, PpoDiagnostics), ControllerError> {
    let rewards = check_rewards(trajs)?;
    let mut tape = Tape::new();
    let net = TapeNet::load(&mut tape, policy, true);
    let (l, d) = build_loss(&mut tape, &net, policy, trajs, &rewards, cfg)?;
    let mut grad = vec![0.0; policy.len()];
    let mut g = tape.backward(l);
    for (i, b) in policy.blocks.iter().enumerate() {
        if let Some(m) = g.take(net.blocks[i]) {
            grad[b.range()].copy_from_slice(&m.data);
        }
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(ControllerError::NonFiniteGradient);
    }
    Ok((tape.value(l).scalar_value(), grad, d))
}

/// Gradient message for the parameter server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientPacket {
    pub grad: Vec<f64>,
    pub agent: usize,
    /// Policy version the trajectories were sampled under.
    pub version: u64,
    pub batch: usize,
}

/// Run `cfg.epochs` PPO passes and package the result per `cfg.mode`.
pub fn ppo_gradient(
    policy: &PolicyParams,
    trajs: &[Trajectory],
    cfg: &PpoConfig,
    agent: usize,
    version: u64,
) -> Result<(GradientPacket, PpoDiagnostics), ControllerError> {
    let mut local = policy.clone();
    let mut first: Option<Vec<f64>> = None;
    let mut last = PpoDiagnostics::default();
    for _ in 0..cfg.epochs.max(1) {
        let (_, g, d) = loss_and_gradient(&local, trajs, cfg)?;
        last = d;
        for (p, gi) in local.data.iter_mut().zip(&g) {
            *p -= cfg.lr * gi;
        }
        if first.is_none() {
            first = Some(g);
            if cfg.mode == PacketMode::FirstEpochGradient {
                break;
            }
        }
    }
    let grad = match cfg.mode {
        PacketMode::FirstEpochGradient => first.expect("at least one pass"),
        PacketMode::CumulativeDelta => policy.data.iter().zip(&local.data).map(|(a, b)| (a - b) / cfg.lr).collect(),
    };
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(ControllerError::NonFiniteGradient);
    }
    Ok((GradientPacket { grad, agent, version, batch: trajs.len() }, last))
}

/// Apply one Adam step to the policy.
pub fn adam_update(policy: &mut PolicyParams, state: &mut AdamState, grad: &[f64]) -> Result<(), ControllerError> {
    if grad.len() != policy.len() || state.len() != policy.len() {
        return Err(ControllerError::Shape(format!(
            "gradient {} / state {} / params {}",
            grad.len(),
            state.len(),
            policy.len()
        )));
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(ControllerError::NonFiniteGradient);
    }
    state.update(&mut policy.data, grad);
    Ok(())
}

const MAGIC: &[u8; 8] = b"NASPOLCY";
const FORMAT_VERSION: u32 = 1;

/// Binary checkpoint: magic, format version, update step, sizes, arities,
/// partition map, then every parameter as a little-endian `f64`.
pub fn write_checkpoint(path: &Path, policy: &PolicyParams, step: u64) -> Result<(), ControllerError> {
    let mut buf = Vec::with_capacity(64 + policy.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    for v in [policy.hidden, policy.embed, policy.arities.len()] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for &a in &policy.arities {
        buf.extend_from_slice(&(a as u64).to_le_bytes());
    }
    buf.extend_from_slice(&(policy.blocks.len() as u64).to_le_bytes());
    for b in &policy.blocks {
        buf.extend_from_slice(&(b.name.len() as u64).to_le_bytes());
        buf.extend_from_slice(b.name.as_bytes());
        buf.extend_from_slice(&(b.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(b.cols as u64).to_le_bytes());
    }
    buf.extend_from_slice(&(policy.len() as u64).to_le_bytes());
    for v in &policy.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ControllerError> {
        if self.pos + n > self.buf.len() {
            return Err(ControllerError::Checkpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, ControllerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, ControllerError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| ControllerError::Checkpoint(format!("size {v} too large")))
    }
}

/// Read a checkpoint written by [`write_checkpoint`]; returns the policy and step.
pub fn read_checkpoint(path: &Path) -> Result<(PolicyParams, u64), ControllerError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(ControllerError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ControllerError::Checkpoint(format!("unsupported version {version}")));
    }
    let step = c.u64()?;
    let hidden = c.usize()?;
    let embed = c.usize()?;
    let n_slots = c.usize()?;
    let arities = (0..n_slots).map(|_| c.usize()).collect::<Result<Vec<_>, _>>()?;
    let n_blocks = c.usize()?;
    let mut blocks = Vec::with_capacity(n_blocks.min(1 << 16));
    for _ in 0..n_blocks {
        let len = c.usize()?;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| ControllerError::Checkpoint("block name".into()))?;
        let rows = c.usize()?;
        let cols = c.usize()?;
        blocks.push((name, rows, cols));
    }
    let expected = PolicyParams::layout(&arities, hidden, embed);
    let matches = expected.len() == blocks.len()
        && expected.iter().zip(&blocks).all(|(e, (n, r, cl))| &e.name == n && e.rows == *r && e.cols == *cl);
    if !matches {
        return Err(ControllerError::Checkpoint("partition map does not match the declared shape".into()));
    }
    let n = c.usize()?;
    let total: usize = expected.iter().map(Block::len).sum();
    if n != total {
        return Err(ControllerError::Checkpoint(format!("{n} values, expected {total}")));
    }
    let data = (0..n)
        .map(|_| Ok(f64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes"))))
        .collect::<Result<Vec<f64>, ControllerError>>()?;
    if c.pos != buf.len() {
        return Err(ControllerError::Checkpoint("trailing bytes".into()));
    }
    Ok((PolicyParams { arities, hidden, embed, blocks: expected, data }, step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;

    fn rewarded(policy: &PolicyParams, m: usize, seed: u64) -> Vec<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = sample_batch(policy, m, &mut rng).unwrap();
        for tr in &mut t {
            tr.reward = Some(rng.random_range(-1.0..1.0));
        }
        t
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let a = init_policy(&[3, 4], 1, 8, 4);
        let b = init_policy(&[3, 4], 1, 8, 4);
        let c = init_policy(&[3, 4], 2, 8, 4);
        assert_eq!(a, b);
        assert_ne!(a.data, c.data);
        assert_eq!(a.len(), a.blocks.iter().map(Block::len).sum::<usize>());
        assert!(a.block("lstm.b").unwrap().range().all(|i| a.data[i] == 0.0));
    }

    #[test]
    fn forced_choice_has_zero_log_prob() {
        let p = init_policy(&[1, 3], 0, 8, 4);
        let t = sample_batch(&p, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(t.iter().all(|tr| tr.encoding[0] == 0 && tr.log_probs[0] == 0.0));
    }

    #[test]
    fn fresh_policy_is_near_uniform() {
        let p = init_policy(&[4], 9, 32, 16);
        let t = sample_batch(&p, 10_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut counts = [0usize; 4];
        t.iter().for_each(|tr| counts[tr.encoding[0]] += 1);
        for c in counts {
            let f = c as f64 / 1e4;
            assert!((0.15..=0.35).contains(&f), "{counts:?}");
        }
        let probs = action_probabilities(&p, &[0]);
        let h: f64 = -probs[0].iter().map(|q| q * q.ln()).sum::<f64>();
        assert!(h >= 0.9 * 4f64.ln());
        assert!((probs[0].iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn surrogate_clipping_examples() {
        // one slot, arity 2, logits forced to log-probs via the recorded old values
        let p = init_policy(&[2], 4, 4, 3);
        let cur = action_probabilities(&p, &[0])[0][0].ln();
        let cfg = PpoConfig { value_coef: 0.0, entropy_coef: 0.0, ..PpoConfig::default() };
        // r = 1.5, Â = 1 → surrogate 1.2
        let mut tr = Trajectory { encoding: vec![0], log_probs: vec![cur - 1.5f64.ln()], values: vec![0.0], reward: Some(1.0) };
        let (_, d) = ppo_loss(&p, &[tr.clone()], &cfg).unwrap();
        assert!((d.surrogate - 1.2).abs() < 1e-12);
        // r = 0.5, Â = −1 → −0.8
        tr.log_probs = vec![cur - 0.5f64.ln()];
        tr.reward = Some(-1.0);
        let (_, d) = ppo_loss(&p, &[tr.clone()], &cfg).unwrap();
        assert!((d.surrogate + 0.8).abs() < 1e-12);
        tr.reward = Some(0.0);
        let (l, d) = ppo_loss(&p, &[tr], &cfg).unwrap();
        assert_eq!(d.surrogate, 0.0);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn zero_advantage_leaves_heads_untouched() {
        let p = init_policy(&[3, 2], 5, 6, 4);
        let mut t = sample_batch(&p, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for tr in &mut t {
            tr.values = vec![0.3; 2];
            tr.reward = Some(0.3);
        }
        let cfg = PpoConfig { entropy_coef: 0.0, ..PpoConfig::default() };
        let (_, g, _) = loss_and_gradient(&p, &t, &cfg).unwrap();
        for k in 0..2 {
            for name in [format!("head{k}.w"), format!("head{k}.b")] {
                assert!(p.block(&name).unwrap().range().all(|i| g[i] == 0.0), "{name}");
            }
        }
        // critic value differs from 0.3 so its block moves
        assert!(p.block("critic.b").unwrap().range().any(|i| g[i] != 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut p = init_policy(&[3, 2, 4], 21, 5, 3);
        let t = rewarded(&p, 6, 8);
        // move away from the sampling policy so ratios differ from one
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        p.data.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        let cfg = PpoConfig::default();
        let (_, g, _) = loss_and_gradient(&p, &t, &cfg).unwrap();
        let h = 1e-4;
        for i in 0..p.len() {
            let mut a = p.clone();
            a.data[i] += h;
            let mut b = p.clone();
            b.data[i] -= h;
            let fd = (ppo_loss(&a, &t, &cfg).unwrap().0 - ppo_loss(&b, &t, &cfg).unwrap().0) / (2.0 * h);
            let err = (fd - g[i]).abs();
            assert!(err <= 1e-6f64.max(1e-3 * fd.abs()), "coord {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let p = init_policy(&[3, 3], 2, 6, 4);
        let t = rewarded(&p, 5, 1);
        let mut tt = t.clone();
        tt.extend(t.iter().cloned());
        let cfg = PpoConfig::default();
        let (g1, _) = ppo_gradient(&p, &t, &cfg, 0, 0).unwrap();
        let (g2, _) = ppo_gradient(&p, &tt, &cfg, 0, 0).unwrap();
        for (a, b) in g1.grad.iter().zip(&g2.grad) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn unclipped_single_epoch_is_vanilla_policy_gradient() {
        let p = init_policy(&[4, 2], 7, 6, 4);
        let t = rewarded(&p, 6, 2);
        let cfg = PpoConfig { clip: f64::INFINITY, epochs: 1, ..PpoConfig::default() };
        let (pk, _) = ppo_gradient(&p, &t, &cfg, 0, 0).unwrap();
        // Log-likelihood form: −mean[log π · Â] + critic + entropy, whose gradient
        // agrees with the ratio form at θ = θ_old
        let mut tape = Tape::new();
        let net = TapeNet::load(&mut tape, &p, true);
        let b = t.len();
        let mut h = tape.constant(Matrix::zeros(b, p.hidden));
        let mut c = tape.constant(Matrix::zeros(b, p.hidden));
        let ret = tape.constant(Matrix::from_vec(b, 1, t.iter().map(|x| x.reward.unwrap()).collect()));
        let mut tokens = vec![0; b];
        let mut terms = Vec::new();
        for s in 0..2 {
            (h, c) = net.cell(&mut tape, &p, &tokens, h, c);
            let logits = net.head(&mut tape, &p, s, h);
            let v = net.critic(&mut tape, &p, h);
            let ls = tape.log_softmax(logits);
            let acts: Vec<usize> = t.iter().map(|x| x.encoding[s]).collect();
            let lp = tape.pick_cols(ls, &acts);
            let adv = tape.constant(Matrix::from_vec(b, 1, t.iter().map(|x| x.reward.unwrap() - x.values[s]).collect()));
            let pg = tape.mul(lp, adv);
            let pg = tape.scale(pg, -1.0);
            let e = tape.sub(ret, v);
            let e2 = tape.square(e);
            let vl = tape.scale(e2, cfg.value_coef);
            let pr = tape.exp(ls);
            let plp = tape.mul(pr, ls);
            let negent = tape.row_sum(plp);
            let en = tape.scale(negent, cfg.entropy_coef);
            let x = tape.add(pg, vl);
            terms.push(tape.add(x, en));
            for (r, x) in t.iter().enumerate() {
                tokens[r] = p.token(s, x.encoding[s]);
            }
        }
        let all = tape.concat_cols(&terms);
        let loss = tape.mean(all);
        let mut g = tape.backward(loss);
        let mut reference = vec![0.0; p.len()];
        for (i, blk) in p.blocks.iter().enumerate() {
            if let Some(m) = g.take(net.blocks[i]) {
                reference[blk.range()].copy_from_slice(&m.data);
            }
        }
        for (a, b) in pk.grad.iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = init_policy(&[3], 0, 4, 2);
        let before = p.data.clone();
        let mut st = AdamState::new(p.len(), AdamConfig::with_lr(0.01));
        let g: Vec<f64> = (0..p.len()).map(|i| if i % 2 == 0 { 1.0 } else { -3.0 }).collect();
        adam_update(&mut p, &mut st, &g).unwrap();
        for i in 0..p.len() {
            let d = p.data[i] - before[i];
            assert!(d.abs() >= 0.9 * 0.01 && d.abs() <= 0.01 + 1e-15);
            assert_eq!(d.signum(), -g[i].signum());
        }
        let snapshot = p.data.clone();
        let (m0, v0) = (st.m.clone(), st.v.clone());
        let n = p.len();
        adam_update(&mut p, &mut st, &vec![0.0; n]).unwrap();
        assert!(st.m.iter().zip(&m0).all(|(a, b)| (a - 0.9 * b).abs() < 1e-15));
        assert!(st.v.iter().zip(&v0).all(|(a, b)| (a - 0.999 * b).abs() < 1e-15));
        // zero gradient, nonzero momentum still moves; a fresh state does not
        let mut q = init_policy(&[3], 0, 4, 2);
        let orig = q.data.clone();
        let mut fresh = AdamState::new(q.len(), AdamConfig::default());
        let n = q.len();
        adam_update(&mut q, &mut fresh, &vec![0.0; n]).unwrap();
        assert_eq!(q.data, orig);
        assert_ne!(p.data, snapshot);
        assert!(adam_update(&mut q, &mut fresh, &vec![f64::NAN; n]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let p = init_policy(&[3, 5, 2], 4, 8, 4);
        write_checkpoint(&path, &p, 17).unwrap();
        let (q, step) = read_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(step, 17);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(ControllerError::Checkpoint(_))));
    }
}
