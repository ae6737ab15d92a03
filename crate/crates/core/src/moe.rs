//! Stacked mixture-of-experts layers with exact reverse-mode gradients.
//!
//! Gradient conventions: the selected set and the penalty mask are constants
//! of the forward pass; mixture weights are differentiated through the
//! selected-set softmax; the penalty is a constant offset so the suppressed
//! logits have identity Jacobian with respect to the raw logits.

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, gemm_nt, matvec_into, softmax, transpose, Matrix, Rng};
use crate::router::{
    self, GateProConfig, GatingWeights, RoutingDecision, RoutingMode, SimilarityCache,
    SimilarityRefresh,
};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximation GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    gelu_grad_from_tanh(x, gelu_tanh(x))
}

#[inline]
fn gelu_tanh(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// Derivative given the already-computed inner tanh.
#[inline]
fn gelu_grad_from_tanh(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Two-layer GELU feed-forward expert, `d -> h -> d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl ExpertParams {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        ExpertParams {
            w1: Matrix::zeros(hidden, dim),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(dim, hidden),
            b2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    fn check(&self) -> Result<()> {
        let (h, d) = self.w1.shape();
        if self.w2.shape() != (d, h) || self.b1.len() != h || self.b2.len() != d {
            return Err(Error::contract("expert parameter shapes are inconsistent"));
        }
        Ok(())
    }
}

fn expert_apply(e: &ExpertParams, x: &[f64]) -> Vec<f64> {
    let hidden: Vec<f64> = e.b1.iter().enumerate().map(|(r, &b)| gelu(b + dot(e.w1.row(r), x))).collect();
    e.b2.iter().enumerate().map(|(r, &b)| b + dot(e.w2.row(r), &hidden)).collect()
}

/// `w2 · gelu(w1 · x + b1) + b2`
pub fn expert_forward(e: &ExpertParams, x: &[f64]) -> Result<Vec<f64>> {
    e.check()?;
    if x.len() != e.dim() {
        return Err(Error::contract(format!(
            "expert expects dimension {}, got {}",
            e.dim(),
            x.len()
        )));
    }
    Ok(expert_apply(e, x))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayerParams {
    pub gating: GatingWeights,
    pub experts: Vec<ExpertParams>,
}

impl MoeLayerParams {
    pub fn n_experts(&self) -> usize {
        self.gating.n_experts()
    }

    pub fn dim(&self) -> usize {
        self.gating.dim()
    }

    fn check(&self) -> Result<()> {
        if self.experts.len() != self.gating.n_experts() {
            return Err(Error::contract("expert count does not match gate rows"));
        }
        let (d, h) = (self.dim(), self.experts[0].hidden());
        for e in &self.experts {
            e.check()?;
            if e.dim() != d || e.hidden() != h {
                return Err(Error::contract("experts disagree on dimensions"));
            }
        }
        Ok(())
    }
}

/// Shape of a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackDims {
    pub n_experts: usize,
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeStackParams {
    pub layers: Vec<MoeLayerParams>,
    /// `c x d` linear head.
    pub readout: Matrix,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = std * rng.next_gaussian();
    }
    m
}

impl MoeStackParams {
    /// Gaussian initialisation scaled by fan-in; expert output projections
    /// start small so the residual stream is close to identity.
    pub fn init(dims: StackDims, rng: &mut Rng) -> Result<Self> {
        let StackDims {
            n_experts,
            dim,
            hidden,
            layers,
            classes,
        } = dims;
        if layers == 0 || n_experts < 2 || dim == 0 || hidden == 0 || classes == 0 {
            return Err(Error::contract(format!("invalid stack dimensions {dims:?}")));
        }
        let in_std = 1.0 / (dim as f64).sqrt();
        let out_std = 0.1 / (hidden as f64).sqrt();
        let layers = (0..layers)
            .map(|_| {
                let gating = GatingWeights::new(gaussian_matrix(n_experts, dim, in_std, rng))?;
                let experts = (0..n_experts)
                    .map(|_| ExpertParams {
                        w1: gaussian_matrix(hidden, dim, in_std, rng),
                        b1: vec![0.0; hidden],
                        w2: gaussian_matrix(dim, hidden, out_std, rng),
                        b2: vec![0.0; dim],
                    })
                    .collect();
                Ok(MoeLayerParams { gating, experts })
            })
            .collect::<Result<_>>()?;
        let readout = gaussian_matrix(classes, dim, in_std, rng);
        Ok(MoeStackParams { layers, readout })
    }

    pub fn dims(&self) -> StackDims {
        let first = &self.layers[0];
        StackDims {
            n_experts: first.n_experts(),
            dim: first.dim(),
            hidden: first.experts[0].hidden(),
            layers: self.layers.len(),
            classes: self.readout.rows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::contract("stack has no layers"));
        }
        let d = self.layers[0].dim();
        for l in &self.layers {
            l.check()?;
            if l.dim() != d {
                return Err(Error::contract("layers disagree on model dimension"));
            }
        }
        if self.readout.cols() != d {
            return Err(Error::contract("readout width does not match model dimension"));
        }
        Ok(())
    }

    /// Named tensors in declaration order: per layer the gate, then per
    /// expert `w1, b1, w2, b2`; finally the readout.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(TensorRef::matrix(format!("layer{l}.gate"), layer.gating.matrix()));
            for (e, ex) in layer.experts.iter().enumerate() {
                push_expert(&mut out, l, e, ex);
            }
        }
        out.push(TensorRef::matrix("readout".into(), &self.readout));
        out
    }

    /// Mutable views in the same order as [`MoeStackParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.gating.matrix_mut().data_mut());
            for ex in &mut layer.experts {
                push_expert_mut(&mut out, ex);
            }
        }
        out.push(self.readout.data_mut());
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

fn push_expert<'a>(out: &mut Vec<TensorRef<'a>>, l: usize, e: usize, ex: &'a ExpertParams) {
    out.push(TensorRef::matrix(format!("layer{l}.expert{e}.w1"), &ex.w1));
    out.push(TensorRef::vector(format!("layer{l}.expert{e}.b1"), &ex.b1));
    out.push(TensorRef::matrix(format!("layer{l}.expert{e}.w2"), &ex.w2));
    out.push(TensorRef::vector(format!("layer{l}.expert{e}.b2"), &ex.b2));
}

fn push_expert_mut<'a>(out: &mut Vec<&'a mut [f64]>, ex: &'a mut ExpertParams) {
    out.push(ex.w1.data_mut());
    out.push(&mut ex.b1);
    out.push(ex.w2.data_mut());
    out.push(&mut ex.b2);
}

/// Borrowed view of one parameter tensor.
#[derive(Clone, Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl<'a> TensorRef<'a> {
    fn matrix(name: String, m: &'a Matrix) -> Self {
        TensorRef {
            name,
            rows: m.rows(),
            cols: m.cols(),
            data: m.data(),
        }
    }

    fn vector(name: String, v: &'a [f64]) -> Self {
        TensorRef {
            name,
            rows: v.len(),
            cols: 1,
            data: v,
        }
    }
}

/// Gradient of the loss with respect to each parameter of a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
    pub readout: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub gating: Matrix,
    pub experts: Vec<ExpertParams>,
}

impl Gradients {
    pub fn zeros_like(p: &MoeStackParams) -> Self {
        let layers = p
            .layers
            .iter()
            .map(|l| LayerGradients {
                gating: Matrix::zeros(l.n_experts(), l.dim()),
                experts: l
                    .experts
                    .iter()
                    .map(|e| ExpertParams::zeros(e.dim(), e.hidden()))
                    .collect(),
            })
            .collect();
        Gradients {
            layers,
            readout: Matrix::zeros(p.readout.rows(), p.readout.cols()),
        }
    }

    /// Flat slices in the parameter declaration order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.layers {
            out.push(layer.gating.data());
            for ex in &layer.experts {
                out.push(ex.w1.data());
                out.push(&ex.b1);
                out.push(ex.w2.data());
                out.push(&ex.b2);
            }
        }
        out.push(self.readout.data());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.gating.data_mut());
            for ex in &mut layer.experts {
                push_expert_mut(&mut out, ex);
            }
        }
        out.push(self.readout.data_mut());
        out
    }

    fn shapes_match(&self, p: &MoeStackParams) -> bool {
        let a = self.tensors();
        let b = p.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(g, t)| g.len() == t.data.len())
    }
}

/// Per-layer routing statistics over a batch, feeding the balance loss.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRoutingStats {
    /// Number of top-k assignments each expert received.
    pub tokens_per_expert: Vec<usize>,
    /// Mean full-softmax router probability per expert.
    pub mean_router_prob: Vec<f64>,
    pub batch_tokens: usize,
    pub k: usize,
}

impl BatchRoutingStats {
    pub fn new(tokens_per_expert: Vec<usize>, mean_router_prob: Vec<f64>, batch_tokens: usize, k: usize) -> Result<Self> {
        if batch_tokens == 0 || k == 0 {
            return Err(Error::contract("routing stats need a positive batch and k"));
        }
        if tokens_per_expert.len() != mean_router_prob.len() {
            return Err(Error::contract("routing stats vectors differ in length"));
        }
        if tokens_per_expert.iter().sum::<usize>() != batch_tokens * k {
            return Err(Error::contract("token counts do not sum to batch_tokens * k"));
        }
        if (mean_router_prob.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::contract("mean router probabilities do not sum to 1"));
        }
        Ok(BatchRoutingStats {
            tokens_per_expert,
            mean_router_prob,
            batch_tokens,
            k,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.tokens_per_expert.len()
    }

    /// Fraction of assignments per expert.
    pub fn load_fractions(&self) -> Vec<f64> {
        let total = (self.batch_tokens * self.k) as f64;
        self.tokens_per_expert.iter().map(|&c| c as f64 / total).collect()
    }
}

/// `coeff · N · Σ f_i P_i`.
pub fn balance_loss(stats: &BatchRoutingStats, coeff: f64) -> f64 {
    let n = stats.n_experts() as f64;
    let fp: f64 = stats
        .load_fractions()
        .iter()
        .zip(&stats.mean_router_prob)
        .map(|(f, p)| f * p)
        .sum();
    coeff * n * fp
}

fn check_cfg(p: &MoeLayerParams, cfg: &GateProConfig) -> Result<()> {
    cfg.validate(p.n_experts())
}

fn route_layer(
    p: &MoeLayerParams,
    x: &[f64],
    mode: RoutingMode,
    cfg: &GateProConfig,
    cache: Option<&SimilarityCache>,
) -> Result<RoutingDecision> {
    let mut logits = vec![0.0; p.n_experts()];
    matvec_into(p.gating.matrix(), x, &mut logits);
    Ok(match mode {
        RoutingMode::Baseline => router::route_logits_baseline(logits, cfg.k),
        RoutingMode::GatePro => match (cfg.similarity_refresh, cache) {
            (SimilarityRefresh::PerStep, Some(c)) => {
                router::route_logits_gatepro(logits, &c.counterparts, cfg.lambda, cfg.k)
            }
            (SimilarityRefresh::PerStep, None) => {
                return Err(Error::contract("gatepro routing needs a similarity cache"));
            }
            (SimilarityRefresh::PerForward, _) => {
                let fresh = SimilarityCache::build(&p.gating)?;
                router::route_logits_gatepro(logits, &fresh.counterparts, cfg.lambda, cfg.k)
            }
        },
    })
}

/// Sparse combination of the selected experts' outputs.
pub fn moe_layer_forward(
    p: &MoeLayerParams,
    x: &[f64],
    mode: RoutingMode,
    cfg: &GateProConfig,
    cache: Option<&SimilarityCache>,
) -> Result<(Vec<f64>, RoutingDecision)> {
    p.check()?;
    check_cfg(p, cfg)?;
    if x.len() != p.dim() {
        return Err(Error::contract("token dimension does not match layer"));
    }
    let decision = route_layer(p, x, mode, cfg, cache)?;
    let mut y = vec![0.0; p.dim()];
    for &i in &decision.selected {
        axpy(decision.weights[i], &expert_apply(&p.experts[i], x), &mut y);
    }
    Ok((y, decision))
}

/// Output of a full stack forward for one token.
#[derive(Clone, Debug)]
pub struct StackOutput {
    pub logits: Vec<f64>,
    /// One decision per layer, first layer first.
    pub decisions: Vec<RoutingDecision>,
}

fn caches_for(mode: RoutingMode, caches: &[SimilarityCache], l: usize) -> Option<&SimilarityCache> {
    match mode {
        RoutingMode::Baseline => None,
        RoutingMode::GatePro => caches.get(l),
    }
}

fn check_stack_call(p: &MoeStackParams, mode: RoutingMode, cfg: &GateProConfig, caches: &[SimilarityCache]) -> Result<()> {
    p.validate()?;
    cfg.validate(p.layers[0].n_experts())?;
    if mode == RoutingMode::GatePro
        && cfg.similarity_refresh == SimilarityRefresh::PerStep
        && caches.len() != p.layers.len()
    {
        return Err(Error::contract(format!(
            "gatepro mode needs {} similarity caches, got {}",
            p.layers.len(),
            caches.len()
        )));
    }
    Ok(())
}

/// Residual stack forward: `h <- h + layer(h)` per layer, then the readout.
pub fn stack_forward(
    p: &MoeStackParams,
    x: &[f64],
    mode: RoutingMode,
    cfg: &GateProConfig,
    caches: &[SimilarityCache],
) -> Result<StackOutput> {
    check_stack_call(p, mode, cfg, caches)?;
    if x.len() != p.layers[0].dim() {
        return Err(Error::contract("token dimension does not match stack"));
    }
    let mut h = x.to_vec();
    let mut decisions = Vec::with_capacity(p.layers.len());
    for (l, layer) in p.layers.iter().enumerate() {
        let decision = route_layer(layer, &h, mode, cfg, caches_for(mode, caches, l))?;
        let mut next = h.clone();
        for &i in &decision.selected {
            axpy(decision.weights[i], &expert_apply(&layer.experts[i], &h), &mut next);
        }
        h = next;
        decisions.push(decision);
    }
    let mut logits = vec![0.0; p.readout.rows()];
    matvec_into(&p.readout, &h, &mut logits);
    Ok(StackOutput { logits, decisions })
}

/// Builds one similarity snapshot per layer.
pub fn build_caches(p: &MoeStackParams) -> Result<Vec<SimilarityCache>> {
    p.layers.iter().map(|l| SimilarityCache::build(&l.gating)).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Everything a training step needs from one forward/backward pass.
#[derive(Clone, Debug)]
pub struct BackwardOutput {
    /// Task loss plus every layer's balance loss.
    pub loss: f64,
    /// Mean softmax cross-entropy.
    pub task_loss: f64,
    pub balance_losses: Vec<f64>,
    pub grads: Gradients,
    /// `decisions[layer][token]`.
    pub decisions: Vec<Vec<RoutingDecision>>,
    pub stats: Vec<BatchRoutingStats>,
    /// Tokens whose argmax readout logit equals the label.
    pub correct: usize,
}

/// One expert's activations for the batch rows routed to it.
#[derive(Clone, Debug)]
struct ExpertBlock {
    /// Batch rows routed to this expert, ascending.
    tokens: Vec<usize>,
    /// Mixture weight of each routed row.
    alpha: Vec<f64>,
    pre: Vec<f64>,
    tanh: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

#[derive(Clone, Debug)]
struct LayerBlock {
    /// `b x d` layer input.
    input: Vec<f64>,
    decisions: Vec<RoutingDecision>,
    experts: Vec<ExpertBlock>,
}

fn gather_rows(src: &[f64], width: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

fn add_bias_rows(m: &mut [f64], bias: &[f64]) {
    for row in m.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn sum_rows_into(m: &[f64], acc: &mut [f64]) {
    for row in m.chunks_exact(acc.len()) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

/// Batched layer forward. Produces the same routing and the same values as
/// running [`stack_forward`] token by token.
fn layer_block_forward(
    layer: &MoeLayerParams,
    input: Vec<f64>,
    b: usize,
    mode: RoutingMode,
    cfg: &GateProConfig,
    cache: Option<&SimilarityCache>,
) -> Result<(LayerBlock, Vec<f64>)> {
    let (n, d) = (layer.n_experts(), layer.dim());
    let mut logits = vec![0.0; b * n];
    gemm_nt(&input, layer.gating.matrix().data(), d, &mut logits);
    let fresh;
    let cmap = match (mode, cfg.similarity_refresh, cache) {
        (RoutingMode::Baseline, _, _) => None,
        (RoutingMode::GatePro, SimilarityRefresh::PerStep, Some(c)) => Some(&c.counterparts),
        (RoutingMode::GatePro, SimilarityRefresh::PerStep, None) => {
            return Err(Error::contract("gatepro routing needs a similarity cache"));
        }
        (RoutingMode::GatePro, SimilarityRefresh::PerForward, _) => {
            fresh = SimilarityCache::build(&layer.gating)?;
            Some(&fresh.counterparts)
        }
    };
    let decisions: Vec<RoutingDecision> = logits
        .chunks_exact(n)
        .map(|row| match cmap {
            None => router::route_logits_baseline(row.to_vec(), cfg.k),
            Some(c) => router::route_logits_gatepro(row.to_vec(), c, cfg.lambda, cfg.k),
        })
        .collect();

    let mut routed: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (t, dec) in decisions.iter().enumerate() {
        for &i in &dec.selected {
            routed[i].push(t);
        }
    }
    let experts: Vec<ExpertBlock> = routed
        .into_iter()
        .zip(&layer.experts)
        .map(|(tokens, e)| {
            let h = e.hidden();
            let m = tokens.len();
            let x = gather_rows(&input, d, &tokens);
            let mut pre = vec![0.0; m * h];
            gemm_nt(&x, e.w1.data(), d, &mut pre);
            add_bias_rows(&mut pre, &e.b1);
            let tanh: Vec<f64> = pre.iter().map(|&v| gelu_tanh(v)).collect();
            let hidden: Vec<f64> = pre.iter().zip(&tanh).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
            let mut out = vec![0.0; m * d];
            gemm_nt(&hidden, e.w2.data(), h, &mut out);
            add_bias_rows(&mut out, &e.b2);
            ExpertBlock {
                tokens,
                alpha: Vec::with_capacity(m),
                pre,
                tanh,
                hidden,
                out,
            }
        })
        .collect();
    let mut block = LayerBlock {
        input,
        decisions,
        experts,
    };

    // Row of each (token, selected expert) pair inside that expert's block,
    // so the residual sum runs in the same order as the per-token path.
    let mut cursor = vec![0usize; n];
    let mut next = block.input.clone();
    for (t, dec) in block.decisions.iter().enumerate() {
        let dst = &mut next[t * d..(t + 1) * d];
        for &i in &dec.selected {
            let eb = &mut block.experts[i];
            let r = cursor[i];
            cursor[i] += 1;
            eb.alpha.push(dec.weights[i]);
            axpy(dec.weights[i], &eb.out[r * d..(r + 1) * d], dst);
        }
    }
    Ok((block, next))
}

/// Forward and backward over a batch. Losses are means over tokens; the
/// balance loss is summed over layers.
pub fn stack_backward(
    p: &MoeStackParams,
    batch: &Batch,
    mode: RoutingMode,
    cfg: &GateProConfig,
    caches: &[SimilarityCache],
    balance_coeff: f64,
) -> Result<BackwardOutput> {
    check_stack_call(p, mode, cfg, caches)?;
    if batch.is_empty() || batch.inputs.len() != batch.labels.len() {
        return Err(Error::contract("batch is empty or inputs and labels differ in length"));
    }
    let dims = p.dims();
    if batch.inputs.iter().any(|x| x.len() != dims.dim) {
        return Err(Error::contract("batch token dimension does not match stack"));
    }
    if batch.labels.iter().any(|&y| y >= dims.classes) {
        return Err(Error::contract("label outside readout classes"));
    }
    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let (n, d, c) = (dims.n_experts, dims.dim, dims.classes);

    let mut h: Vec<f64> = batch.inputs.concat();
    let mut blocks = Vec::with_capacity(dims.layers);
    for (l, layer) in p.layers.iter().enumerate() {
        let (block, next) = layer_block_forward(layer, h, b, mode, cfg, caches_for(mode, caches, l))?;
        blocks.push(block);
        h = next;
    }
    let mut logits = vec![0.0; b * c];
    gemm_nt(&h, p.readout.data(), d, &mut logits);

    let mut grads = Gradients::zeros_like(p);
    let mut task_loss = 0.0;
    let mut correct = 0;
    let mut dz = vec![0.0; b * c];
    for ((row, dzr), &label) in logits.chunks_exact(c).zip(dz.chunks_exact_mut(c)).zip(&batch.labels) {
        let z = softmax(row);
        task_loss -= z[label].ln();
        if crate::numerics::top_k_unchecked(row, 1)[0] == label {
            correct += 1;
        }
        for (g, &q) in dzr.iter_mut().zip(&z) {
            *g = q * inv_b;
        }
        dzr[label] -= inv_b;
    }
    task_loss *= inv_b;
    gemm_nt(&transpose(&dz, b, c), &transpose(&h, b, d), b, grads.readout.data_mut());
    let mut dh = vec![0.0; b * d];
    gemm_nt(&dz, &transpose(p.readout.data(), c, d), c, &mut dh);

    let mut stats = Vec::with_capacity(dims.layers);
    let mut balance_losses = Vec::with_capacity(dims.layers);
    for (l, block) in blocks.iter().enumerate().rev() {
        let layer = &p.layers[l];
        let lg = &mut grads.layers[l];
        let probs: Vec<Vec<f64>> = block.decisions.iter().map(|dec| softmax(&dec.raw_logits)).collect();
        let mut counts = vec![0usize; n];
        let mut mean_p = vec![0.0; n];
        for (dec, pr) in block.decisions.iter().zip(&probs) {
            for &i in &dec.selected {
                counts[i] += 1;
            }
            for (m, &q) in mean_p.iter_mut().zip(pr) {
                *m += q;
            }
        }
        for m in &mut mean_p {
            *m *= inv_b;
        }
        let s = BatchRoutingStats {
            tokens_per_expert: counts,
            mean_router_prob: mean_p,
            batch_tokens: b,
            k: cfg.k,
        };
        balance_losses.push(balance_loss(&s, balance_coeff));
        // d(balance)/d(p_t,i) for every token: coeff · N · f_i / B.
        let balance_dp: Vec<f64> = s
            .load_fractions()
            .iter()
            .map(|f| balance_coeff * n as f64 * f * inv_b)
            .collect();
        stats.push(s);

        let dy = dh.clone();
        let mut dalpha = vec![0.0; b * n];
        for (i, (eb, e)) in block.experts.iter().zip(&layer.experts).enumerate() {
            let m = eb.tokens.len();
            if m == 0 {
                continue;
            }
            let hd = e.hidden();
            let mut dout = vec![0.0; m * d];
            for (r, &t) in eb.tokens.iter().enumerate() {
                let dyt = &dy[t * d..(t + 1) * d];
                let out_r = &eb.out[r * d..(r + 1) * d];
                dalpha[t * n + i] = dot(out_r, dyt);
                for (o, &v) in dout[r * d..(r + 1) * d].iter_mut().zip(dyt) {
                    *o = eb.alpha[r] * v;
                }
            }
            let g = &mut lg.experts[i];
            sum_rows_into(&dout, &mut g.b2);
            gemm_nt(&transpose(&dout, m, d), &transpose(&eb.hidden, m, hd), m, g.w2.data_mut());
            let mut dpre = vec![0.0; m * hd];
            gemm_nt(&dout, &transpose(e.w2.data(), d, hd), d, &mut dpre);
            for ((v, &x), &t) in dpre.iter_mut().zip(&eb.pre).zip(&eb.tanh) {
                *v *= gelu_grad_from_tanh(x, t);
            }
            sum_rows_into(&dpre, &mut g.b1);
            let x = gather_rows(&block.input, d, &eb.tokens);
            gemm_nt(&transpose(&dpre, m, hd), &transpose(&x, m, d), m, g.w1.data_mut());
            let mut dx = vec![0.0; m * d];
            gemm_nt(&dpre, &transpose(e.w1.data(), hd, d), hd, &mut dx);
            for (r, &t) in eb.tokens.iter().enumerate() {
                for (a, &v) in dh[t * d..(t + 1) * d].iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                    *a += v;
                }
            }
        }

        let mut dlogits = vec![0.0; b * n];
        for (t, (dec, pr)) in block.decisions.iter().zip(&probs).enumerate() {
            let da = &dalpha[t * n..(t + 1) * n];
            let dl = &mut dlogits[t * n..(t + 1) * n];
            let mean_dalpha: f64 = dec.selected.iter().map(|&i| dec.weights[i] * da[i]).sum();
            for &i in &dec.selected {
                dl[i] = dec.weights[i] * (da[i] - mean_dalpha);
            }
            if balance_coeff != 0.0 {
                let gp: f64 = balance_dp.iter().zip(pr).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    dl[i] += pr[i] * (balance_dp[i] - gp);
                }
            }
        }
        gemm_nt(&transpose(&dlogits, b, n), &transpose(&block.input, b, d), b, lg.gating.data_mut());
        let mut dx = vec![0.0; b * d];
        gemm_nt(&dlogits, &transpose(layer.gating.matrix().data(), n, d), n, &mut dx);
        for (a, &v) in dh.iter_mut().zip(&dx) {
            *a += v;
        }
    }
    stats.reverse();
    balance_losses.reverse();
    let loss = task_loss + balance_losses.iter().sum::<f64>();
    let decisions = blocks.into_iter().map(|bl| bl.decisions).collect();
    Ok(BackwardOutput {
        loss,
        task_loss,
        balance_losses,
        grads,
        decisions,
        stats,
        correct,
    })
}

/// Adam moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(p: &MoeStackParams) -> Self {
        let zeros: Vec<Vec<f64>> = p.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn shapes_match(&self, p: &MoeStackParams) -> bool {
        let t = p.tensors();
        self.m.len() == t.len()
            && self.v.len() == t.len()
            && t.iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(t, (m, v))| m.len() == t.data.len() && v.len() == t.data.len())
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(p: &mut MoeStackParams, g: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if !g.shapes_match(p) || !state.shapes_match(p) {
        return Err(Error::contract("adam: gradient or state shapes do not match parameters"));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let grads = g.tensors();
    for (((w, gr), m), v) in p
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((wi, &gi), mi), vi) in w.iter_mut().zip(gr).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *wi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
