//! Chain-of-thought pipeline: the prompt-filtering transformer, the
//! gradient-descent regression oracle and the step-by-step loop that learns
//! a leaky-ReLU MLP one layer at a time.
//!
//! The filtering stack has seven layers. The first extracts the sequence
//! length from the log-enumeration row, three more extract and broadcast
//! the index of the step being predicted (with the successor index created
//! for free in an otherwise unused ReLU), two turn layer-cycle offsets into
//! 0/1 bits, and the last applies the bit filter to both data bands.

use crate::encodings::{assemble_cot_input, ideal_filtered, PromptLayout};
use crate::error::{Error, Result};
use crate::numerics::{leaky_relu_scalar, LeakyAlpha, Matrix, Temperature};
use crate::transformer::{
    block_forward, AttentionHead, ConsequentialMask, FunctionBlock, TransformerLayer,
};
use rand::Rng;

/// An L-layer leaky-ReLU MLP: `s^l = phi(W_l s^(l-1))`.
#[derive(Debug, Clone)]
pub struct MlpTask {
    weights: Vec<Matrix>,
    alpha: LeakyAlpha,
    dims: Vec<usize>,
}

impl MlpTask {
    pub fn new(weights: Vec<Matrix>, alpha: LeakyAlpha) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("task needs at least one layer".into()));
        }
        let mut dims = vec![weights[0].cols()];
        for (i, w) in weights.iter().enumerate() {
            if w.cols() != dims[i] {
                return Err(Error::ShapeError(format!(
                    "layer {i} expects input dim {}, got weight with {} columns",
                    dims[i],
                    w.cols()
                )));
            }
            dims.push(w.rows());
        }
        Ok(Self {
            weights,
            alpha,
            dims,
        })
    }

    /// Random task with entries scaled by the input width, keeping feature
    /// magnitudes near one at desk scale.
    pub fn random<R: Rng>(dims: &[usize], alpha: LeakyAlpha, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidInput(
                "need at least input and output dims".into(),
            ));
        }
        let mut weights = Vec::new();
        for l in 1..dims.len() {
            let scale = 1.5 / (dims[l - 1] as f64).sqrt();
            let data = (0..dims[l] * dims[l - 1])
                .map(|_| rng.gen_range(-scale..scale))
                .collect();
            weights.push(Matrix::new(dims[l], dims[l - 1], data)?);
        }
        Self::new(weights, alpha)
    }

    /// Random task whose square layers are orthogonal, preserving feature
    /// norms across the chain.
    pub fn random_orthogonal<R: Rng>(d: usize, depth: usize, rng: &mut R) -> Result<Self> {
        let mut weights = Vec::new();
        for _ in 0..depth {
            weights.push(random_orthogonal_matrix(d, rng)?);
        }
        Self::new(weights, LeakyAlpha::new(1.0)?)
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn alpha(&self) -> LeakyAlpha {
        self.alpha
    }

    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.weights[layer]
    }

    pub fn max_dim(&self) -> usize {
        *self.dims.iter().max().expect("dims nonempty")
    }

    /// Full feature chain `[x, s^1, ..., s^L]`.
    pub fn forward_chain(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.dims[0] {
            return Err(Error::ShapeError(format!(
                "input dim {} does not match task dim {}",
                x.len(),
                self.dims[0]
            )));
        }
        let mut chain = vec![x.to_vec()];
        for w in &self.weights {
            let prev = chain.last().expect("chain nonempty");
            let mut next = vec![0.0; w.rows()];
            for r in 0..w.rows() {
                let mut acc = 0.0;
                for c in 0..w.cols() {
                    acc += w.get(r, c) * prev[c];
                }
                next[r] = leaky_relu_scalar(acc, self.alpha);
            }
            chain.push(next);
        }
        Ok(chain)
    }
}

fn random_orthogonal_matrix<R: Rng>(d: usize, rng: &mut R) -> Result<Matrix> {
    // Gram-Schmidt on a random square matrix; retry on near-dependence.
    loop {
        let mut cols: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut ok = true;
        for i in 0..d {
            for j in 0..i {
                let proj: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let cj = cols[j].clone();
                for (v, w) in cols[i].iter_mut().zip(&cj) {
                    *v -= proj * w;
                }
            }
            let norm: f64 = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            for v in cols[i].iter_mut() {
                *v /= norm;
            }
        }
        if ok {
            let mut m = Matrix::zeros(d, d);
            for (c, col) in cols.iter().enumerate() {
                for (r, &v) in col.iter().enumerate() {
                    m.set(r, c, v);
                }
            }
            return Ok(m);
        }
    }
}

/// Demonstration chains plus the test input and accumulated predictions.
#[derive(Debug, Clone)]
pub struct CotPrompt {
    chains: Vec<Vec<Vec<f64>>>,
    test_input: Vec<f64>,
    predictions: Vec<Vec<f64>>,
    depth: usize,
    d_data: usize,
    n_max: usize,
}

impl CotPrompt {
    /// Samples `n` demonstration chains and a test input from the task.
    pub fn generate<R: Rng>(task: &MlpTask, n: usize, n_max: usize, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::PromptStateError(
                "a prompt needs at least one demonstration chain".into(),
            ));
        }
        let d0 = task.dims()[0];
        let sample =
            |rng: &mut R| -> Vec<f64> { (0..d0).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let chains = (0..n)
            .map(|_| task.forward_chain(&sample(rng)))
            .collect::<Result<Vec<_>>>()?;
        let test_input = sample(rng);
        let prompt = Self {
            chains,
            test_input,
            predictions: Vec::new(),
            depth: task.depth(),
            d_data: task.max_dim(),
            n_max,
        };
        prompt.layout(1)?;
        Ok(prompt)
    }

    pub fn chains(&self) -> &[Vec<Vec<f64>>] {
        &self.chains
    }

    pub fn test_input(&self) -> &[f64] {
        &self.test_input
    }

    pub fn predictions(&self) -> &[Vec<f64>] {
        &self.predictions
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn d_data(&self) -> usize {
        self.d_data
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    /// Rebuilds a prompt from serialized parts. Chain consistency against a
    /// task is the serializer's responsibility; shapes are still checked.
    pub fn from_parts(
        chains: Vec<Vec<Vec<f64>>>,
        test_input: Vec<f64>,
        predictions: Vec<Vec<f64>>,
        depth: usize,
        d_data: usize,
        n_max: usize,
    ) -> Result<Self> {
        if chains.is_empty() {
            return Err(Error::PromptStateError(
                "a prompt needs at least one demonstration chain".into(),
            ));
        }
        if chains.iter().any(|c| c.len() != depth + 1) {
            return Err(Error::PromptStateError(format!(
                "every chain must carry {} tokens",
                depth + 1
            )));
        }
        if predictions.len() > depth {
            return Err(Error::PromptStateError(
                "more predictions than layers".into(),
            ));
        }
        Ok(Self {
            chains,
            test_input,
            predictions,
            depth,
            d_data,
            n_max,
        })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn push_prediction(&mut self, pred: Vec<f64>) -> Result<()> {
        if self.predictions.len() >= self.depth {
            return Err(Error::PromptStateError(
                "prompt already holds a complete prediction chain".into(),
            ));
        }
        self.predictions.push(pred);
        Ok(())
    }

    /// Layout for predicting step `ell`; requires the prompt to hold exactly
    /// the first `ell - 1` predictions.
    pub fn layout(&self, ell: usize) -> Result<PromptLayout> {
        if ell == 0 || ell > self.depth {
            return Err(Error::PromptStateError(format!(
                "step {ell} out of range 1..={}",
                self.depth
            )));
        }
        if self.predictions.len() != ell - 1 {
            return Err(Error::PromptStateError(format!(
                "predicting step {ell} needs {} predictions, prompt holds {}",
                ell - 1,
                self.predictions.len()
            )));
        }
        PromptLayout::new(self.d_data, self.depth, self.chains.len(), ell, self.n_max)
    }
}

/// Per-layer condition numbers of the demonstration feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionProfile {
    /// `kappas[l]` belongs to the features feeding layer `l+1`; infinity
    /// flags fat or rank-deficient feature matrices.
    pub kappas: Vec<f64>,
}

impl ConditionProfile {
    pub fn kappa_max(&self) -> f64 {
        self.kappas.iter().cloned().fold(1.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.kappas.iter().all(|k| k.is_finite())
    }
}

/// Condition numbers of `T_l = [s_1^l ... s_n^l]^T` for `l = 0..L-1`.
pub fn condition_profile(task: &MlpTask, prompt: &CotPrompt) -> ConditionProfile {
    let n = prompt.n_chains();
    let mut kappas = Vec::new();
    for l in 0..task.depth() {
        let d = task.dims()[l];
        let mut t = Matrix::zeros(n, d);
        for (i, chain) in prompt.chains().iter().enumerate() {
            for c in 0..d {
                t.set(i, c, chain[l][c]);
            }
        }
        kappas.push(condition_number(&t));
    }
    ConditionProfile { kappas }
}

fn condition_number(t: &Matrix) -> f64 {
    if t.rows() < t.cols() {
        return f64::INFINITY;
    }
    let sv = t.singular_values();
    let smax = sv[0];
    let smin = sv[t.cols() - 1];
    if smin < 1e-12 * smax {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Gradient-descent settings for the in-context regression oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GdConfig {
    /// Step size; `None` picks `1 / (2 sigma_max^2)`, halfway into the
    /// stable range.
    pub step_size: Option<f64>,
    pub iterations: usize,
    /// Target resolution of the full chain-of-thought run.
    pub epsilon: f64,
    /// Per-layer filtering budget.
    pub delta: f64,
}

impl GdConfig {
    pub fn new(iterations: usize, epsilon: f64) -> Self {
        Self {
            step_size: None,
            iterations,
            epsilon,
            delta: epsilon,
        }
    }
}

/// `T` steps of gradient descent on `sum_i (y_i - w^T x_i)^2` from zero.
pub fn gd_linear_regression(x: &Matrix, y: &[f64], cfg: &GdConfig) -> Result<Vec<f64>> {
    let n = x.rows();
    let d = x.cols();
    if y.len() != n {
        return Err(Error::ShapeError(format!(
            "feature rows {n} vs {} targets",
            y.len()
        )));
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("regression data must be finite".into()));
    }
    if cfg.iterations == 0 {
        return Err(Error::InvalidInput("need at least one gd step".into()));
    }
    let smax = x.singular_values()[0];
    let limit = if smax > 0.0 {
        1.0 / (smax * smax)
    } else {
        f64::INFINITY
    };
    let eta = match cfg.step_size {
        Some(e) => {
            if !(e > 0.0 && e <= limit) {
                return Err(Error::InvalidStep(e));
            }
            e
        }
        None => {
            if smax == 0.0 {
                return Ok(vec![0.0; d]);
            }
            0.5 / (smax * smax)
        }
    };
    let mut w = vec![0.0; d];
    for _ in 0..cfg.iterations {
        // gradient = -2 X^T (y - X w)
        let mut resid = vec![0.0; n];
        for i in 0..n {
            let mut pred = 0.0;
            for j in 0..d {
                pred += x.get(i, j) * w[j];
            }
            resid[i] = y[i] - pred;
        }
        for j in 0..d {
            let mut g = 0.0;
            for i in 0..n {
                g += x.get(i, j) * resid[i];
            }
            w[j] += 2.0 * eta * g;
        }
    }
    Ok(w)
}

/// Iteration budget `ceil(c0 kappa^2 ln(1/eps))` with `c0 = 2`.
pub fn iterations_for(epsilon: f64, kappa: f64) -> Result<usize> {
    if !kappa.is_finite() {
        return Err(Error::UnboundedIterations);
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidInput(format!(
            "resolution must lie in (0, 1), got {epsilon}"
        )));
    }
    let c0 = 2.0;
    let t = (c0 * kappa * kappa * (1.0 / epsilon).ln()).ceil() as usize;
    Ok(t.max(1))
}

/// Tuning constants of the filtering transformer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Squared operand scale of the linearized multiplication.
    pub score_scale_sq: f64,
    /// Anchor score pinning the softmax denominator.
    pub anchor_score: f64,
    /// Filter constant of the final bit-filter layer.
    pub filter_constant: f64,
    /// Temperature of the pointer-driven broadcast layer.
    pub broadcast_lambda: f64,
    /// Declared budget on consequential entries.
    pub delta: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            score_scale_sq: 1e-8,
            anchor_score: 30.0,
            filter_constant: 40.0,
            broadcast_lambda: 16.0,
            delta: 1e-4,
        }
    }
}

fn selector_row(d: usize, row: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(1, d);
    m.set(0, row, scale);
    m
}

/// Builds the seven-layer filtering transformer for a prompt layout.
///
/// The weights do not depend on the column count; only the block's declared
/// input shape and mask do.
pub fn build_filtering_transformer(
    layout: &PromptLayout,
    cfg: &FilterConfig,
) -> Result<FunctionBlock> {
    if layout.total_cols() > layout.n_max {
        return Err(Error::CapacityError {
            n: layout.total_cols(),
            max: layout.n_max,
        });
    }
    if layout.total_cols() < 3 {
        return Err(Error::LayoutError(
            "the filtering stack needs at least three columns".into(),
        ));
    }
    let d = layout.total_rows();
    let n = layout.total_cols();
    let d_data = layout.d_data;
    let quarter = ((cfg.anchor_score.exp()) / cfg.score_scale_sq).powf(0.25);
    let mut layers = Vec::new();

    // Layer 1: sequence length. Keys read the log-enumeration row at unit
    // temperature, so column weights are proportional to the position index
    // and the enumeration value row averages to (2N+1)/3; the ReLU then
    // applies 3/2 x - 1/2, leaving exactly N in the length scratch row.
    {
        let head = AttentionHead::new(
            selector_row(d, layout.ln_row(), 1.0),
            selector_row(d, layout.ones_row(), 1.0),
            {
                let mut v = Matrix::zeros(d, d);
                v.set(layout.scratch_len_row(), layout.enum_row(), 1.0);
                v
            },
        )?;
        let mut w1 = Matrix::zeros(1, d);
        w1.set(0, layout.scratch_len_row(), 1.0);
        let mut w2 = Matrix::zeros(d, 1);
        w2.set(layout.scratch_len_row(), 0, 0.5);
        let mut b2 = Matrix::zeros(d, 1);
        b2.set(layout.scratch_len_row(), 0, -0.5);
        layers.push(TransformerLayer::new(
            vec![head],
            w1,
            Matrix::zeros(1, 1),
            w2,
            b2,
            Temperature::new(1.0)?,
        )?);
    }

    // Layer 2: uniform attention averages the test indicator into ell/N;
    // the ReLU drops a copy into the operand scratch row at the operand
    // marker column only.
    {
        let head = AttentionHead::new(
            selector_row(d, layout.ones_row(), 1.0),
            selector_row(d, layout.ones_row(), 1.0),
            {
                let mut v = Matrix::zeros(d, d);
                v.set(layout.scratch_frac_row(), layout.indicator_row(), 1.0);
                v
            },
        )?;
        let mut w1 = Matrix::zeros(1, d);
        w1.set(0, layout.scratch_frac_row(), 1.0);
        w1.set(0, layout.operand_marker_row(), 2.0);
        let mut b1 = Matrix::zeros(1, 1);
        b1.set(0, 0, -2.0);
        let mut w2 = Matrix::zeros(d, 1);
        w2.set(layout.scratch_operand_row(), 0, 1.0);
        layers.push(TransformerLayer::new(
            vec![head],
            w1,
            b1,
            w2,
            Matrix::zeros(d, 1),
            Temperature::new(1.0)?,
        )?);
    }

    // Layer 3: linearized multiplication N * (ell/N). The anchor column
    // pins the softmax denominator at e^C, the operand column's weight
    // carries e^(s^2 ell), and the value contrast of the two recovers
    // ell * s^2 * e^-C, rescaled in four factor-of-(e^C/s^2)^(1/4) stages
    // spread over this layer and the next.
    {
        let mut w_k = Matrix::zeros(2, d);
        w_k.set(0, layout.scratch_operand_row(), 1.0);
        w_k.set(1, layout.anchor_marker_row(), cfg.anchor_score);
        let mut w_q = Matrix::zeros(2, d);
        w_q.set(0, layout.scratch_len_row(), cfg.score_scale_sq);
        w_q.set(1, layout.ones_row(), 1.0);
        let mut v = Matrix::zeros(d, d);
        v.set(
            layout.scratch_prod_row(),
            layout.operand_marker_row(),
            quarter,
        );
        v.set(
            layout.scratch_prod_row(),
            layout.anchor_marker_row(),
            -quarter * (-cfg.anchor_score).exp(),
        );
        let head = AttentionHead::new(w_k, w_q, v)?;
        let mut w1 = Matrix::zeros(2, d);
        w1.set(0, layout.scratch_prod_row(), 1.0);
        w1.set(1, layout.scratch_prod_row(), -1.0);
        let mut w2 = Matrix::zeros(d, 2);
        w2.set(layout.scratch_prod_row(), 0, quarter - 1.0);
        w2.set(layout.scratch_prod_row(), 1, -(quarter - 1.0));
        layers.push(TransformerLayer::new(
            vec![head],
            w1,
            Matrix::zeros(2, 1),
            w2,
            Matrix::zeros(d, 1),
            Temperature::new(1.0)?,
        )?);
    }

    // Layer 4: pointer-driven broadcast of the product from column 3 into
    // the step scratch row of every column; the otherwise unused ReLU
    // finishes the rescale and writes the successor step value. This is the
    // zero-layer successor construction.
    {
        let b = layout.enc_width;
        let mut w_k = Matrix::zeros(b, d);
        let mut w_q = Matrix::zeros(b, d);
        for i in 0..b {
            w_k.set(i, layout.enc_cur_start() + i, 1.0);
            w_q.set(i, layout.enc_dst_start() + i, 1.0);
        }
        let mut v = Matrix::zeros(d, d);
        v.set(
            layout.scratch_step_row(),
            layout.scratch_prod_row(),
            quarter,
        );
        let head = AttentionHead::new(w_k, w_q, v)?;
        let mut w1 = Matrix::zeros(2, d);
        w1.set(0, layout.scratch_step_row(), 1.0);
        w1.set(1, layout.scratch_step_row(), -1.0);
        let mut w2 = Matrix::zeros(d, 2);
        w2.set(layout.scratch_step_row(), 0, quarter - 1.0);
        w2.set(layout.scratch_step_row(), 1, -(quarter - 1.0));
        w2.set(layout.scratch_step_next_row(), 0, quarter);
        w2.set(layout.scratch_step_next_row(), 1, -quarter);
        let mut b2 = Matrix::zeros(d, 1);
        b2.set(layout.scratch_step_next_row(), 0, 1.0);
        layers.push(TransformerLayer::new(
            vec![head],
            w1,
            Matrix::zeros(2, 1),
            w2,
            b2,
            Temperature::new(cfg.broadcast_lambda)?,
        )?);
    }

    // Layer 5: subtract the step value from the first cycle row and its
    // successor from the second, turning them into integer offsets.
    {
        let mut w1 = Matrix::zeros(2, d);
        w1.set(0, layout.scratch_step_row(), 1.0);
        w1.set(1, layout.scratch_step_next_row(), 1.0);
        let mut w2 = Matrix::zeros(d, 2);
        w2.set(layout.cycle_a_row(), 0, -1.0);
        w2.set(layout.cycle_b_row(), 1, -1.0);
        layers.push(TransformerLayer::new(
            vec![AttentionHead::inert(d)],
            w1,
            Matrix::zeros(2, 1),
            w2,
            Matrix::zeros(d, 1),
            Temperature::new(1.0)?,
        )?);
    }

    // Layer 6: zero-indicator on both cycle rows, producing the bits.
    {
        let targets = [layout.cycle_a_row(), layout.cycle_b_row()];
        let hidden = 4 * targets.len();
        let mut w1 = Matrix::zeros(hidden, d);
        let mut b1 = Matrix::zeros(hidden, 1);
        let mut w2 = Matrix::zeros(d, hidden);
        let mut b2 = Matrix::zeros(d, 1);
        for (i, &row) in targets.iter().enumerate() {
            let h = 4 * i;
            w1.set(h, row, 1.0);
            w1.set(h + 1, row, -1.0);
            w1.set(h + 2, row, 1.0);
            b1.set(h + 2, 0, -1.0);
            w1.set(h + 3, row, -1.0);
            b1.set(h + 3, 0, -1.0);
            w2.set(row, h, -2.0);
            w2.set(row, h + 2, 1.0);
            w2.set(row, h + 3, 1.0);
            b2.set(row, 0, 1.0);
        }
        layers.push(TransformerLayer::new(
            vec![AttentionHead::inert(d)],
            w1,
            b1,
            w2,
            b2,
            Temperature::new(1.0)?,
        )?);
    }

    // Layer 7: bit filter. Band one is filtered in place by the first bit
    // row; band two receives the copy of band one filtered by the second.
    {
        let c = cfg.filter_constant;
        let hidden = 6 * d_data;
        let mut w1 = Matrix::zeros(hidden, d);
        let mut w2 = Matrix::zeros(d, hidden);
        for r in 0..d_data {
            let x_row = layout.band1_start() + r;
            let h = 6 * r;
            w1.set(h, layout.cycle_a_row(), -c);
            w1.set(h, x_row, -1.0);
            w1.set(h + 1, layout.cycle_a_row(), -c);
            w1.set(h + 1, x_row, 1.0);
            w2.set(x_row, h, 1.0);
            w2.set(x_row, h + 1, -1.0);
            w1.set(h + 2, layout.cycle_b_row(), -c);
            w1.set(h + 2, x_row, -1.0);
            w1.set(h + 3, layout.cycle_b_row(), -c);
            w1.set(h + 3, x_row, 1.0);
            w1.set(h + 4, x_row, 1.0);
            w1.set(h + 5, x_row, -1.0);
            let y_row = layout.band2_start() + r;
            w2.set(y_row, h + 2, 1.0);
            w2.set(y_row, h + 3, -1.0);
            w2.set(y_row, h + 4, 1.0);
            w2.set(y_row, h + 5, -1.0);
        }
        layers.push(TransformerLayer::new(
            vec![AttentionHead::inert(d)],
            w1,
            Matrix::zeros(hidden, 1),
            w2,
            Matrix::zeros(d, 1),
            Temperature::new(1.0)?,
        )?);
    }

    let mut mask = ConsequentialMask::none(d, n);
    mask.mark_region(layout.band1_start(), 2 * d_data, 0, n);
    mask.mark_region(layout.cycle_a_row(), 2, 0, n);
    FunctionBlock::new("cot-filter", layers, mask, cfg.delta, d, n)
}

/// Expected filter output on the consequential rows: the ideal filtered
/// bands plus the two bit rows.
pub fn filter_oracle(prompt: &CotPrompt, ell: usize) -> Result<Matrix> {
    let layout = prompt.layout(ell)?;
    let ideal = ideal_filtered(prompt, ell)?;
    let mut expected = Matrix::zeros(layout.total_rows(), layout.total_cols());
    for r in 0..2 * layout.d_data {
        for c in 0..layout.total_cols() {
            expected.set(r, c, ideal.get(r, c));
        }
    }
    for c in 0..layout.total_cols() {
        let cyc = layout.cycle_value(c);
        expected.set(layout.cycle_a_row(), c, if cyc == ell { 1.0 } else { 0.0 });
        expected.set(
            layout.cycle_b_row(),
            c,
            if cyc == ell + 1 { 1.0 } else { 0.0 },
        );
    }
    Ok(expected)
}

/// Projects a filter output onto the two data bands, the fixed
/// token-wise projection of the decoupling statement.
pub fn project_bands(layout: &PromptLayout, out: &Matrix) -> Matrix {
    let mut proj = Matrix::zeros(2 * layout.d_data, out.cols());
    for r in 0..2 * layout.d_data {
        for c in 0..out.cols() {
            proj.set(r, c, out.get(r, c));
        }
    }
    proj
}

/// Which filtering route feeds the regression stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterMode {
    /// The constructed seven-layer transformer.
    Constructed,
    /// The ideal oracle, isolating gradient descent as the error source.
    Ideal,
}

/// One chain-of-thought step: filter, invert the activation, solve each
/// output neuron by gradient descent, and apply the recovered layer to the
/// filtered test feature.
pub fn cot_step(
    task: &MlpTask,
    prompt: &CotPrompt,
    ell: usize,
    cfg: &GdConfig,
    mode: FilterMode,
    filter_cfg: &FilterConfig,
) -> Result<Vec<f64>> {
    let layout = prompt.layout(ell)?;
    let bands = match mode {
        FilterMode::Ideal => ideal_filtered(prompt, ell)?,
        FilterMode::Constructed => {
            let block = build_filtering_transformer(&layout, filter_cfg)?;
            let x = assemble_cot_input(prompt, ell)?;
            let out = block_forward(&block, &x)?;
            project_bands(&layout, &out)
        }
    };
    let d_in = task.dims()[ell - 1];
    let d_out = task.dims()[ell];
    let n = prompt.n_chains();

    let mut features = Matrix::zeros(n, d_in);
    let mut targets = vec![vec![0.0; n]; d_out];
    for i in 0..n {
        let col_in = layout.demo_token_col(i, ell);
        for j in 0..d_in {
            features.set(i, j, bands.get(layout.band1_start() + j, col_in));
        }
        let col_out = layout.demo_token_col(i, ell + 1);
        for r in 0..d_out {
            let observed = bands.get(layout.band2_start() + r, col_out);
            // exact leaky-ReLU inversion turns the layer into a regression
            targets[r][i] = if observed >= 0.0 {
                observed
            } else {
                observed / task.alpha().alpha()
            };
        }
    }
    if condition_number(&features) == f64::INFINITY {
        return Err(Error::UnderdeterminedLayer { layer: ell });
    }
    let mut recovered = Matrix::zeros(d_out, d_in);
    for r in 0..d_out {
        let w = gd_linear_regression(&features, &targets[r], cfg)?;
        for j in 0..d_in {
            recovered.set(r, j, w[j]);
        }
    }
    let test_col = layout.test_token_col(ell);
    let mut test_feature = vec![0.0; d_in];
    for j in 0..d_in {
        test_feature[j] = bands.get(layout.band1_start() + j, test_col);
    }
    let mut pred = vec![0.0; d_out];
    for r in 0..d_out {
        let mut acc = 0.0;
        for j in 0..d_in {
            acc += recovered.get(r, j) * test_feature[j];
        }
        pred[r] = leaky_relu_scalar(acc, task.alpha());
    }
    Ok(pred)
}

/// One row of the chain-of-thought error trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub ell: usize,
    pub step_error: f64,
    pub cumulative_bound: f64,
    pub pass: bool,
}

/// Outcome of a full chain-of-thought run.
#[derive(Debug, Clone)]
pub struct CotRun {
    pub prediction: Vec<f64>,
    pub trace: Vec<StepTrace>,
}

/// Error-accumulation slack over the per-step bound `ell * eps / L`.
pub const TRACE_SLACK: f64 = 0.5;

/// Runs all L steps, feeding each prediction back into the prompt, and
/// records per-step errors against the ground-truth chain.
pub fn run_cot(
    task: &MlpTask,
    prompt: &CotPrompt,
    cfg: &GdConfig,
    mode: FilterMode,
    filter_cfg: &FilterConfig,
) -> Result<CotRun> {
    let mut working = prompt.clone();
    let truth = task.forward_chain(prompt.test_input())?;
    let depth = task.depth();
    let mut trace = Vec::new();
    for ell in 1..=depth {
        let pred = cot_step(task, &working, ell, cfg, mode, filter_cfg)?;
        let err = pred
            .iter()
            .zip(&truth[ell])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let bound = ell as f64 * cfg.epsilon / depth as f64 * (1.0 + TRACE_SLACK);
        trace.push(StepTrace {
            ell,
            step_error: err,
            cumulative_bound: bound,
            pass: err <= bound,
        });
        working.push_prediction(pred)?;
    }
    Ok(CotRun {
        prediction: working.predictions().last().expect("depth >= 1").clone(),
        trace,
    })
}
