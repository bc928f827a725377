//! Matrix transposition and multiplication as weight programs.
//!
//! Multiplication linearizes the softmax: operand columns are scaled so
//! their score contributions are tiny while a marked anchor column carries
//! a large constant score that pins the softmax denominator. The weight
//! difference between an operand column and the anchor then equals
//! `(e^x - 1) / e^C` with `x` proportional to the desired inner product,
//! and fixed rescaling stages recover it up to a second-order remainder.
//!
//! Transposition is pure data movement: fetch a group gate, reduce each
//! column to the single matrix entry it is responsible for, re-place that
//! scalar at the row named by the column's within-group index, and gather
//! each group back into a full column. All its error comes from softmax
//! leakage, so it shrinks exponentially in the temperature.

use crate::encodings::{encoding_width, make_binary_encodings};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Temperature};
use crate::primitives::lambda_for;
use crate::transformer::{AttentionHead, ConsequentialMask, FunctionBlock, TransformerLayer};

/// Knobs of the softmax linearization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizationConfig {
    /// Operand scale `s`; scores carry `s^2` times the inner product.
    pub score_scale: f64,
    /// Number of anchor columns supplying the pinned denominator.
    pub denom_block: usize,
    /// Constant score of the anchor columns.
    pub anchor_score: f64,
    /// Temperature of the pointer-driven write-back layer.
    pub copy_lambda: f64,
}

impl LinearizationConfig {
    pub fn new(
        score_scale: f64,
        denom_block: usize,
        anchor_score: f64,
        copy_lambda: f64,
    ) -> Result<Self> {
        if !(score_scale > 0.0 && score_scale < 1.0) {
            return Err(Error::InvalidInput(format!(
                "score scale must lie in (0, 1), got {score_scale}"
            )));
        }
        if denom_block == 0 {
            return Err(Error::InvalidInput(
                "denominator block must be nonempty".into(),
            ));
        }
        if !(anchor_score > 0.0 && copy_lambda > 0.0) {
            return Err(Error::InvalidInput(
                "anchor score and copy temperature must be positive".into(),
            ));
        }
        Ok(Self {
            score_scale,
            denom_block,
            anchor_score,
            copy_lambda,
        })
    }

    /// Total factor undoing the denominator and the operand scaling.
    pub fn rescale(&self) -> f64 {
        self.denom_block as f64 * self.anchor_score.exp() / (self.score_scale * self.score_scale)
    }

    /// The rescale split evenly over the four value/ReLU stages.
    pub fn stage_rescale(&self) -> f64 {
        self.rescale().powf(0.25)
    }
}

impl Default for LinearizationConfig {
    fn default() -> Self {
        Self {
            score_scale: 1e-3,
            denom_block: 1,
            anchor_score: 1e12f64.ln(),
            copy_lambda: 18.0,
        }
    }
}

/// Certified bound on the masked error of the multiplication block.
///
/// With `x = s^2 p` the linearized readout is `(e^x - 1)/(s^2 (1 + eta))`
/// against target `p`, giving
/// `|out - p| <= (s^2 P^2 e^(s^2 P) / 2 + P eta) / (1 - eta)` for
/// `P = k c_a c_b` and `eta` the relative weight the data columns add to
/// the anchored denominator; the trailing terms cover write-back leakage
/// and the double-precision floor.
pub fn linearization_error_bound(
    cfg: &LinearizationConfig,
    k: usize,
    m: usize,
    n: usize,
    c_a: f64,
    c_b: f64,
) -> f64 {
    let p = k as f64 * c_a * c_b;
    let s2 = cfg.score_scale * cfg.score_scale;
    let x = s2 * p;
    let eta = (m + n) as f64 * x.exp() / (cfg.denom_block as f64 * cfg.anchor_score.exp());
    let lin = (s2 * p * p * x.exp() / 2.0 + p * eta) / (1.0 - eta).max(0.5);
    let cols = (m + n + cfg.denom_block) as f64;
    let leak = 16.0 * cols * p.max(1.0) * x.exp() * (-2.0 * cfg.copy_lambda).exp();
    lin + leak + 1e-12 * (1.0 + p)
}

/// Row and column layout of the multiplication block input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatmulLayout {
    pub k: usize,
    pub m: usize,
    pub n: usize,
    pub denom_block: usize,
    pub enc_width: usize,
}

impl MatmulLayout {
    pub fn new(k: usize, m: usize, n: usize, denom_block: usize) -> Self {
        let cols = m + n + denom_block;
        Self {
            k,
            m,
            n,
            denom_block,
            enc_width: encoding_width(cols),
        }
    }

    pub fn q_start(&self) -> usize {
        0
    }

    pub fn id_start(&self) -> usize {
        self.k
    }

    pub fn ones_row(&self) -> usize {
        self.k + self.m + self.n
    }

    pub fn anchor_row(&self) -> usize {
        self.ones_row() + 1
    }

    pub fn scratch_start(&self) -> usize {
        self.anchor_row() + 1
    }

    pub fn dest_start(&self) -> usize {
        self.scratch_start() + self.m
    }

    pub fn enc_cur_start(&self) -> usize {
        self.dest_start() + self.m
    }

    pub fn enc_ptr_start(&self) -> usize {
        self.enc_cur_start() + self.enc_width
    }

    pub fn total_rows(&self) -> usize {
        self.enc_ptr_start() + self.enc_width
    }

    pub fn a_col(&self, u: usize) -> usize {
        u
    }

    pub fn b_col(&self, v: usize) -> usize {
        self.m + v
    }

    pub fn anchor_col(&self, i: usize) -> usize {
        self.m + self.n + i
    }

    pub fn total_cols(&self) -> usize {
        self.m + self.n + self.denom_block
    }
}

/// Embeds the operands: `A` and `B` side by side in the shared rows, the
/// identity block below them, the anchor markers, and pointer codes that
/// route each product column back onto itself.
pub fn matmul_input(layout: &MatmulLayout, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != layout.k || b.rows() != layout.k {
        return Err(Error::ShapeError(
            "operands must share the contraction dimension".into(),
        ));
    }
    if a.cols() != layout.m || b.cols() != layout.n {
        return Err(Error::ShapeError(
            "operand widths do not match layout".into(),
        ));
    }
    let codes = make_binary_encodings(layout.total_cols())?;
    let mut x = Matrix::zeros(layout.total_rows(), layout.total_cols());
    for u in 0..layout.m {
        for r in 0..layout.k {
            x.set(layout.q_start() + r, layout.a_col(u), a.get(r, u));
        }
        x.set(layout.id_start() + u, layout.a_col(u), 1.0);
    }
    for v in 0..layout.n {
        for r in 0..layout.k {
            x.set(layout.q_start() + r, layout.b_col(v), b.get(r, v));
        }
        x.set(layout.id_start() + layout.m + v, layout.b_col(v), 1.0);
    }
    for i in 0..layout.denom_block {
        x.set(layout.anchor_row(), layout.anchor_col(i), 1.0);
    }
    for c in 0..layout.total_cols() {
        x.set(layout.ones_row(), c, 1.0);
        for (bit, &v) in codes[c].bits().iter().enumerate() {
            x.set(layout.enc_cur_start() + bit, c, v);
        }
        let ptr = if c >= layout.m && c < layout.m + layout.n {
            c
        } else {
            layout.anchor_col(0)
        };
        for (bit, &v) in codes[ptr].bits().iter().enumerate() {
            x.set(layout.enc_ptr_start() + bit, c, v);
        }
    }
    Ok(x)
}

/// Two layers, one head each: the linearization head writes the weight
/// contrasts into the scratch band, then the pointer head copies them to
/// the destination band while the two ReLU stages finish the rescale.
pub fn build_matmul_block(
    layout: &MatmulLayout,
    cfg: &LinearizationConfig,
    d_template: usize,
) -> Result<FunctionBlock> {
    if layout.k >= d_template || layout.m >= d_template || layout.n >= d_template {
        return Err(Error::ShapeError(format!(
            "operand dims ({}, {}, {}) must stay below the template dim {d_template}",
            layout.k, layout.m, layout.n
        )));
    }
    if layout.denom_block != cfg.denom_block {
        return Err(Error::ShapeError(
            "layout and config disagree on the denominator block".into(),
        ));
    }
    let d = layout.total_rows();
    let s = cfg.score_scale;
    let stage = cfg.stage_rescale();

    // layer 1: linearization
    let mut w_k = Matrix::zeros(layout.k + 1, d);
    let mut w_q = Matrix::zeros(layout.k + 1, d);
    for r in 0..layout.k {
        w_k.set(r, layout.q_start() + r, s);
        w_q.set(r, layout.q_start() + r, s);
    }
    w_k.set(layout.k, layout.anchor_row(), cfg.anchor_score);
    w_q.set(layout.k, layout.ones_row(), 1.0);
    let mut v1 = Matrix::zeros(d, d);
    let anchor_read = stage * (-cfg.anchor_score).exp() / cfg.denom_block as f64;
    for r in 0..layout.m {
        v1.set(layout.scratch_start() + r, layout.id_start() + r, stage);
        v1.set(
            layout.scratch_start() + r,
            layout.anchor_row(),
            -anchor_read,
        );
    }
    let head1 = AttentionHead::new(w_k, w_q, v1)?;
    let mut w1 = Matrix::zeros(2 * layout.m, d);
    let mut w2 = Matrix::zeros(d, 2 * layout.m);
    for r in 0..layout.m {
        w1.set(2 * r, layout.scratch_start() + r, 1.0);
        w1.set(2 * r + 1, layout.scratch_start() + r, -1.0);
        w2.set(layout.scratch_start() + r, 2 * r, stage - 1.0);
        w2.set(layout.scratch_start() + r, 2 * r + 1, -(stage - 1.0));
    }
    let layer1 = TransformerLayer::new(
        vec![head1],
        w1,
        Matrix::zeros(2 * layout.m, 1),
        w2,
        Matrix::zeros(d, 1),
        Temperature::new(1.0)?,
    )?;

    // layer 2: pointer-driven write-back plus final rescale and scratch
    // cleanup
    let b = layout.enc_width;
    let mut w_k2 = Matrix::zeros(b, d);
    let mut w_q2 = Matrix::zeros(b, d);
    for i in 0..b {
        w_k2.set(i, layout.enc_cur_start() + i, 1.0);
        w_q2.set(i, layout.enc_ptr_start() + i, 1.0);
    }
    let mut v2 = Matrix::zeros(d, d);
    for r in 0..layout.m {
        v2.set(layout.dest_start() + r, layout.scratch_start() + r, stage);
    }
    let head2 = AttentionHead::new(w_k2, w_q2, v2)?;
    let mut w1b = Matrix::zeros(4 * layout.m, d);
    let mut w2b = Matrix::zeros(d, 4 * layout.m);
    for r in 0..layout.m {
        let h = 4 * r;
        w1b.set(h, layout.dest_start() + r, 1.0);
        w1b.set(h + 1, layout.dest_start() + r, -1.0);
        w2b.set(layout.dest_start() + r, h, stage - 1.0);
        w2b.set(layout.dest_start() + r, h + 1, -(stage - 1.0));
        w1b.set(h + 2, layout.scratch_start() + r, 1.0);
        w1b.set(h + 3, layout.scratch_start() + r, -1.0);
        w2b.set(layout.scratch_start() + r, h + 2, -1.0);
        w2b.set(layout.scratch_start() + r, h + 3, 1.0);
    }
    let layer2 = TransformerLayer::new(
        vec![head2],
        w1b,
        Matrix::zeros(4 * layout.m, 1),
        w2b,
        Matrix::zeros(d, 1),
        Temperature::new(cfg.copy_lambda)?,
    )?;

    let mut mask = ConsequentialMask::none(d, layout.total_cols());
    mask.mark_region(layout.dest_start(), layout.m, layout.b_col(0), layout.n);
    let budget = linearization_error_bound(cfg, layout.k, layout.m, layout.n, 1.0, 1.0);
    FunctionBlock::new(
        format!(
            "matmul[{}x{} . {}x{}]",
            layout.m, layout.k, layout.k, layout.n
        ),
        vec![layer1, layer2],
        mask,
        budget,
        d,
        layout.total_cols(),
    )
}

/// Expected full-shape output of the multiplication block.
pub fn matmul_oracle(layout: &MatmulLayout, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let product = a.transposed().mul(b)?;
    let mut expected = Matrix::zeros(layout.total_rows(), layout.total_cols());
    for r in 0..layout.m {
        for v in 0..layout.n {
            expected.set(layout.dest_start() + r, layout.b_col(v), product.get(r, v));
        }
    }
    Ok(expected)
}

/// The product variants reachable by re-placing the same operands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProductKind {
    AtB,
    BtA,
    AtA,
    BtB,
}

/// Builds the block and embedded input computing the requested product by
/// reusing the multiplication construction with swapped or duplicated
/// operand placement.
pub fn derived_product(
    kind: ProductKind,
    a: &Matrix,
    b: &Matrix,
    cfg: &LinearizationConfig,
    d_template: usize,
) -> Result<(FunctionBlock, MatmulLayout, Matrix, Matrix)> {
    let (left, right) = match kind {
        ProductKind::AtB => (a, b),
        ProductKind::BtA => (b, a),
        ProductKind::AtA => (a, a),
        ProductKind::BtB => (b, b),
    };
    if left.rows() != right.rows() {
        return Err(Error::ShapeError(
            "operands must share the contraction dimension".into(),
        ));
    }
    let layout = MatmulLayout::new(left.rows(), left.cols(), right.cols(), cfg.denom_block);
    let mut block = build_matmul_block(&layout, cfg, d_template)?;
    block.budget = linearization_error_bound(
        cfg,
        layout.k,
        layout.m,
        layout.n,
        left.max_abs().max(1e-12),
        right.max_abs().max(1e-12),
    );
    let input = matmul_input(&layout, left, right)?;
    let expected = matmul_oracle(&layout, left, right)?;
    Ok((block, layout, input, expected))
}

/// Row and column layout of the transpose block.
///
/// The main area holds `d` groups of `d` columns; one auxiliary column per
/// row index carries its one-hot seed in the scratch band, and a trailing
/// null column gives stray queries a harmless target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransposeLayout {
    pub d: usize,
    pub enc_width: usize,
}

impl TransposeLayout {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            enc_width: encoding_width(d + 1),
        }
    }

    pub fn band1_start(&self) -> usize {
        0
    }

    pub fn band2_start(&self) -> usize {
        self.d
    }

    pub fn enc_within_start(&self) -> usize {
        2 * self.d
    }

    pub fn enc_group_start(&self) -> usize {
        2 * self.d + self.enc_width
    }

    pub fn const_row(&self) -> usize {
        2 * self.d + 2 * self.enc_width
    }

    pub fn marker_row(&self) -> usize {
        self.const_row() + 1
    }

    pub fn total_rows(&self) -> usize {
        self.marker_row() + 1
    }

    pub fn main_col(&self, group: usize, within: usize) -> usize {
        group * self.d + within
    }

    pub fn aux_col(&self, u: usize) -> usize {
        self.d * self.d + u
    }

    pub fn null_col(&self) -> usize {
        self.d * self.d + self.d
    }

    pub fn total_cols(&self) -> usize {
        self.d * self.d + self.d + 1
    }
}

/// Tuning of the transpose block: data magnitude bound and leakage target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransposeConfig {
    pub c_bound: f64,
    pub eps: f64,
}

impl Default for TransposeConfig {
    fn default() -> Self {
        Self {
            c_bound: 8.0,
            eps: 1e-8,
        }
    }
}

fn code_query(w_q: &mut Matrix, rows: std::ops::Range<usize>, const_row: usize, code: &[f64]) {
    for (i, r) in rows.enumerate() {
        w_q.set(r, const_row, code[i]);
    }
}

fn band_copy(d_total: usize, dst: usize, src: usize, len: usize, scale: f64) -> Matrix {
    let mut v = Matrix::zeros(d_total, d_total);
    for i in 0..len {
        v.set(dst + i, src + i, scale);
    }
    v
}

fn band_keys(layout: &TransposeLayout, first: usize, second: Option<usize>) -> Matrix {
    let b = layout.enc_width;
    let rows = if second.is_some() { 2 * b } else { b };
    let mut m = Matrix::zeros(rows, layout.total_rows());
    for i in 0..b {
        m.set(i, first + i, 1.0);
    }
    if let Some(s) = second {
        for i in 0..b {
            m.set(b + i, s + i, 1.0);
        }
    }
    m
}

/// Hidden-unit gate: adds `bound * (marker - 1)` to the pre-activation so
/// the unit fires only on marked columns.
struct GatedMlp {
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    bound: f64,
    marker_row: usize,
    next: usize,
}

impl GatedMlp {
    fn new(hidden: usize, d: usize, bound: f64, marker_row: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, d),
            b1: Matrix::zeros(hidden, 1),
            w2: Matrix::zeros(d, hidden),
            bound,
            marker_row,
            next: 0,
        }
    }

    /// Adds one gated unit computing `(sum_i coef_i x_row_i + bias)_+` on
    /// marked columns, feeding `out_coef` into `out_row`.
    fn unit(&mut self, terms: &[(usize, f64)], bias: f64, outs: &[(usize, f64)]) {
        let h = self.next;
        self.next += 1;
        for &(row, coef) in terms {
            self.w1.set(h, row, coef);
        }
        self.w1.set(h, self.marker_row, self.bound);
        self.b1.set(h, 0, bias - self.bound);
        for &(row, coef) in outs {
            self.w2.set(row, h, coef);
        }
    }

    fn finish(self, d: usize, lambda: f64, heads: Vec<AttentionHead>) -> Result<TransformerLayer> {
        assert_eq!(self.next, self.w1.rows(), "all hidden units assigned");
        TransformerLayer::new(
            heads,
            self.w1,
            self.b1,
            self.w2,
            Matrix::zeros(d, 1),
            Temperature::new(lambda)?,
        )
    }
}

/// Embeds a square matrix into the transpose layout: the matrix in group
/// zero of the first band, one-hot seeds in the auxiliary columns, and
/// position, group, constant and marker rows everywhere.
pub fn transpose_input(layout: &TransposeLayout, a: &Matrix) -> Result<Matrix> {
    let d = layout.d;
    if a.rows() != d || a.cols() != d {
        return Err(Error::ShapeError(format!(
            "transpose is built for square {d}x{d} input, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let codes = make_binary_encodings(d + 1)?;
    let null_code = d;
    let mut x = Matrix::zeros(layout.total_rows(), layout.total_cols());
    for g in 0..d {
        for w in 0..d {
            let c = layout.main_col(g, w);
            if g == 0 {
                for r in 0..d {
                    x.set(layout.band1_start() + r, c, a.get(r, w));
                }
            }
            for (i, &v) in codes[w].bits().iter().enumerate() {
                x.set(layout.enc_within_start() + i, c, v);
            }
            for (i, &v) in codes[g].bits().iter().enumerate() {
                x.set(layout.enc_group_start() + i, c, v);
            }
            x.set(layout.marker_row(), c, 1.0);
        }
    }
    for u in 0..d {
        let c = layout.aux_col(u);
        x.set(layout.band2_start() + u, c, 1.0);
        for (i, &v) in codes[u].bits().iter().enumerate() {
            x.set(layout.enc_within_start() + i, c, v);
        }
        for (i, &v) in codes[null_code].bits().iter().enumerate() {
            x.set(layout.enc_group_start() + i, c, v);
        }
    }
    let nc = layout.null_col();
    for (i, &v) in codes[null_code].bits().iter().enumerate() {
        x.set(layout.enc_within_start() + i, nc, v);
        x.set(layout.enc_group_start() + i, nc, v);
    }
    for c in 0..layout.total_cols() {
        x.set(layout.const_row(), c, 1.0);
    }
    Ok(x)
}

/// Four layers: fetch each column's group gate, reduce to the owned matrix
/// entry, re-place it at the within-index row, and gather the groups back
/// into transposed columns.
pub fn build_transpose_block(
    layout: &TransposeLayout,
    cfg: &TransposeConfig,
) -> Result<FunctionBlock> {
    let d = layout.d;
    let d_total = layout.total_rows();
    let codes = make_binary_encodings(d + 1)?;
    let null_code = codes[d].bits().to_vec();
    let zero_code = codes[0].bits().to_vec();
    let b = layout.enc_width;
    let c_gate = 2.0 * cfg.c_bound;
    let gate_bound = 8.0 * (c_gate + cfg.c_bound + 1.0);
    let amplification = 16.0 * (d as f64 + 2.0) * (d as f64 + 1.0) * gate_bound;
    let lambda = lambda_for(
        cfg.eps / amplification,
        cfg.c_bound.max(1.0),
        2.0,
        layout.total_cols(),
    )?;
    let lam = lambda.lambda();
    let mut layers = Vec::new();

    // layer 1: fetch the group gate from the matching auxiliary column
    {
        let w_k = band_keys(
            layout,
            layout.enc_within_start(),
            Some(layout.enc_group_start()),
        );
        let mut w_q = Matrix::zeros(2 * b, d_total);
        for i in 0..b {
            w_q.set(i, layout.enc_group_start() + i, 1.0);
        }
        code_query(&mut w_q, b..2 * b, layout.const_row(), &null_code);
        let v = band_copy(d_total, layout.band2_start(), layout.band2_start(), d, 1.0);
        let head = AttentionHead::new(w_k, w_q, v)?;
        layers.push(TransformerLayer::new(
            vec![head],
            Matrix::zeros(1, d_total),
            Matrix::zeros(1, 1),
            Matrix::zeros(d_total, 1),
            Matrix::zeros(d_total, 1),
            lambda,
        )?);
    }

    // layer 2: fetch the within-column of the stored matrix, cancel the
    // residual, then filter by the gate and collapse to one scalar
    {
        let w_k = band_keys(
            layout,
            layout.enc_within_start(),
            Some(layout.enc_group_start()),
        );
        let mut w_q = Matrix::zeros(2 * b, d_total);
        for i in 0..b {
            w_q.set(i, layout.enc_within_start() + i, 1.0);
        }
        code_query(&mut w_q, b..2 * b, layout.const_row(), &zero_code);
        let v_fetch = band_copy(d_total, layout.band1_start(), layout.band1_start(), d, 1.0);
        let fetch = AttentionHead::new(w_k.clone(), w_q, v_fetch)?;
        let v_cancel = band_copy(d_total, layout.band1_start(), layout.band1_start(), d, -1.0);
        let cancel = AttentionHead::new(
            w_k.clone(),
            band_keys(
                layout,
                layout.enc_within_start(),
                Some(layout.enc_group_start()),
            ),
            v_cancel,
        )?;
        let mut mlp = GatedMlp::new(5 * d, d_total, gate_bound, layout.marker_row());
        let scalar_row = layout.band2_start();
        for r in 0..d {
            let x_row = layout.band1_start() + r;
            let g_row = layout.band2_start() + r;
            // reconstruct the filtered value into the scalar slot and
            // cancel the raw row
            mlp.unit(&[(x_row, 1.0)], 0.0, &[(scalar_row, 1.0), (x_row, -1.0)]);
            mlp.unit(&[(x_row, -1.0)], 0.0, &[(scalar_row, -1.0), (x_row, 1.0)]);
            mlp.unit(
                &[(g_row, -c_gate), (x_row, -1.0)],
                0.0,
                &[(scalar_row, 1.0)],
            );
            mlp.unit(
                &[(g_row, -c_gate), (x_row, 1.0)],
                0.0,
                &[(scalar_row, -1.0)],
            );
            // clear the gate bit
            mlp.unit(&[(g_row, 1.0)], 0.0, &[(g_row, -1.0)]);
        }
        layers.push(mlp.finish(d_total, lam, vec![fetch, cancel])?);
    }

    // layer 3: fetch the within one-hot from the auxiliary columns and
    // re-place the scalar at its row
    {
        let w_k = band_keys(
            layout,
            layout.enc_within_start(),
            Some(layout.enc_group_start()),
        );
        let mut w_q = Matrix::zeros(2 * b, d_total);
        for i in 0..b {
            w_q.set(i, layout.enc_within_start() + i, 1.0);
        }
        code_query(&mut w_q, b..2 * b, layout.const_row(), &null_code);
        let v = band_copy(d_total, layout.band1_start(), layout.band2_start(), d, 1.0);
        let head = AttentionHead::new(w_k, w_q, v)?;
        let c_place = c_gate;
        let mut mlp = GatedMlp::new(4 * d + 2, d_total, gate_bound, layout.marker_row());
        let scalar_row = layout.band2_start();
        for r in 0..d {
            let b_row = layout.band1_start() + r;
            let out_row = layout.band2_start() + r;
            // signed multiply: scalar * bit = (s - C(1-b))_+ - (-s - C(1-b))_+
            mlp.unit(
                &[(scalar_row, 1.0), (b_row, c_place)],
                -c_place,
                &[(out_row, 1.0)],
            );
            mlp.unit(
                &[(scalar_row, -1.0), (b_row, c_place)],
                -c_place,
                &[(out_row, -1.0)],
            );
            // clear the one-hot bit
            mlp.unit(&[(b_row, 1.0)], 0.0, &[(b_row, -1.0)]);
            mlp.unit(&[(b_row, -1.0)], 0.0, &[(b_row, 1.0)]);
        }
        // clear the original scalar slot
        mlp.unit(&[(scalar_row, 1.0)], 0.0, &[(scalar_row, -1.0)]);
        mlp.unit(&[(scalar_row, -1.0)], 0.0, &[(scalar_row, 1.0)]);
        layers.push(mlp.finish(d_total, lam, vec![head])?);
    }

    // layer 4: gather each group uniformly and clear the scratch band
    {
        let w_k = band_keys(layout, layout.enc_group_start(), None);
        let mut w_q = Matrix::zeros(b, d_total);
        for i in 0..b {
            w_q.set(i, layout.enc_within_start() + i, 1.0);
        }
        let v = band_copy(
            d_total,
            layout.band1_start(),
            layout.band2_start(),
            d,
            d as f64,
        );
        let head = AttentionHead::new(w_k, w_q, v)?;
        let mut mlp = GatedMlp::new(2 * d, d_total, gate_bound, layout.marker_row());
        for r in 0..d {
            let row = layout.band2_start() + r;
            mlp.unit(&[(row, 1.0)], 0.0, &[(row, -1.0)]);
            mlp.unit(&[(row, -1.0)], 0.0, &[(row, 1.0)]);
        }
        layers.push(mlp.finish(d_total, lam, vec![head])?);
    }

    let mut mask = ConsequentialMask::none(d_total, layout.total_cols());
    mask.mark_region(layout.band1_start(), d, 0, d * d);
    FunctionBlock::new(
        format!("transpose[{d}x{d}]"),
        layers,
        mask,
        cfg.eps,
        d_total,
        layout.total_cols(),
    )
}

/// Expected full-shape transpose output: the transposed matrix replicated
/// across every main group.
pub fn transpose_oracle(layout: &TransposeLayout, a: &Matrix) -> Matrix {
    let d = layout.d;
    let at = a.transposed();
    let mut expected = Matrix::zeros(layout.total_rows(), layout.total_cols());
    for g in 0..d {
        for w in 0..d {
            for r in 0..d {
                expected.set(r, layout.main_col(g, w), at.get(r, w));
            }
        }
    }
    expected
}

/// Budget of a chain of blocks: budgets add linearly plus a cross term per
/// multiplication stage, each worth twice the largest single budget.
pub fn composed_budget(budgets: &[f64], cross_terms: usize) -> f64 {
    let sum: f64 = budgets.iter().sum();
    let max = budgets.iter().cloned().fold(0.0, f64::max);
    sum + 2.0 * cross_terms as f64 * max
}
