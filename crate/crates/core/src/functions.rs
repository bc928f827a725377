//! Linear combinations of sigmoids encoded inside attention heads, plus a
//! desk-scale fitting utility.
//!
//! Each head realizes one term: a two-way softmax over the data column and
//! a zero-score anchor column acts as the logistic function of the score
//! difference, the query weights carry one direction vector per encodable
//! function, and the stored indicator picks which one is read. The value
//! weights carry the matching coefficients, so the attended cell receives
//! `c_ji * sigmoid(x^T a_ji)` per head.

use crate::encodings::{encoding_width, make_binary_encodings};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Temperature};
use crate::transformer::{AttentionHead, ConsequentialMask, FunctionBlock, TransformerLayer};
use rand::Rng;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One sigmoid term `gamma * sigmoid(tau (a^T x + b))` over a symmetric
/// domain box.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmoidAtom {
    pub gamma: f64,
    pub direction: Vec<f64>,
    pub offset: f64,
    pub tau: f64,
}

impl SigmoidAtom {
    /// Validates the class constraints over the box `|x_i| <= box_radius`.
    pub fn new(
        gamma: f64,
        direction: Vec<f64>,
        offset: f64,
        tau: f64,
        barron_c: f64,
        box_radius: f64,
    ) -> Result<Self> {
        if gamma.abs() > 2.0 * barron_c {
            return Err(Error::InvalidInput(format!(
                "coefficient {gamma} exceeds class bound {}",
                2.0 * barron_c
            )));
        }
        let sup: f64 = box_radius * direction.iter().map(|v| v.abs()).sum::<f64>();
        if sup > 1.0 + 1e-12 {
            return Err(Error::InvalidInput(format!(
                "direction sup-norm {sup} exceeds 1 over the domain box"
            )));
        }
        if offset.abs() > 1.0 + 1e-12 {
            return Err(Error::InvalidInput(format!("offset {offset} exceeds 1")));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sharpness {tau} must be positive"
            )));
        }
        Ok(Self {
            gamma,
            direction,
            offset,
            tau,
        })
    }

    /// Folds sharpness and offset into one direction over `[x, 1]`.
    pub fn folded(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.direction.iter().map(|a| a * self.tau).collect();
        v.push(self.offset * self.tau);
        v
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let dot: f64 = self
            .direction
            .iter()
            .zip(x)
            .map(|(a, v)| a * v)
            .sum::<f64>()
            + self.offset;
        self.gamma * sigmoid(self.tau * dot)
    }
}

/// N encodable functions, each a combination of m sigmoids with folded
/// directions over `[x, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionTable {
    /// `coefficients[(j, i)]`: weight of term i in function j.
    coefficients: Matrix,
    /// One `(d+1) x N` matrix per term; column j is the folded direction.
    directions: Vec<Matrix>,
    dim: usize,
    barron_c: f64,
    box_radius: f64,
}

impl FunctionTable {
    pub fn new(
        coefficients: Matrix,
        directions: Vec<Matrix>,
        dim: usize,
        barron_c: f64,
        box_radius: f64,
    ) -> Result<Self> {
        let n = coefficients.rows();
        let m = coefficients.cols();
        if directions.len() != m {
            return Err(Error::ShapeError(
                "one direction matrix per term required".into(),
            ));
        }
        for g in &directions {
            if g.rows() != dim + 1 || g.cols() != n {
                return Err(Error::ShapeError(format!(
                    "direction matrices must be {}x{n}, got {}x{}",
                    dim + 1,
                    g.rows(),
                    g.cols()
                )));
            }
        }
        if coefficients.max_abs() > 2.0 * barron_c + 1e-12 {
            return Err(Error::InvalidInput(
                "coefficients exceed the class bound".into(),
            ));
        }
        Ok(Self {
            coefficients,
            directions,
            dim,
            barron_c,
            box_radius,
        })
    }

    /// Builds the table from structured atoms, one row of terms per
    /// function.
    pub fn from_atoms(
        atoms: &[Vec<SigmoidAtom>],
        dim: usize,
        barron_c: f64,
        box_radius: f64,
    ) -> Result<Self> {
        let n = atoms.len();
        let m = atoms.first().map(|r| r.len()).unwrap_or(0);
        if n == 0 || m == 0 {
            return Err(Error::InvalidInput(
                "table needs functions and terms".into(),
            ));
        }
        if atoms.iter().any(|r| r.len() != m) {
            return Err(Error::ShapeError("ragged atom rows".into()));
        }
        let mut coefs = Matrix::zeros(n, m);
        let mut dirs = Vec::new();
        for i in 0..m {
            let mut g = Matrix::zeros(dim + 1, n);
            for (j, row) in atoms.iter().enumerate() {
                let folded = row[i].folded();
                if folded.len() != dim + 1 {
                    return Err(Error::ShapeError("atom dimension mismatch".into()));
                }
                coefs.set(j, i, row[i].gamma);
                for (r, &v) in folded.iter().enumerate() {
                    g.set(r, j, v);
                }
            }
            dirs.push(g);
        }
        Self::new(coefs, dirs, dim, barron_c, box_radius)
    }

    pub fn n_funcs(&self) -> usize {
        self.coefficients.rows()
    }

    pub fn terms(&self) -> usize {
        self.coefficients.cols()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn barron_c(&self) -> f64 {
        self.barron_c
    }

    pub fn box_radius(&self) -> f64 {
        self.box_radius
    }

    pub fn coefficient(&self, j: usize, i: usize) -> f64 {
        self.coefficients.get(j, i)
    }

    pub fn folded_direction(&self, j: usize, i: usize) -> Vec<f64> {
        self.directions[i].col(j)
    }
}

/// Direct evaluation of function `j` (1-based), the oracle the block is
/// checked against.
pub fn eval_reference(table: &FunctionTable, j: usize, x: &[f64]) -> Result<f64> {
    if j == 0 || j > table.n_funcs() {
        return Err(Error::InvalidIndicator(format!(
            "function index {j} out of 1..={}",
            table.n_funcs()
        )));
    }
    if x.len() != table.dim() {
        return Err(Error::ShapeError(format!(
            "input dim {} vs table dim {}",
            x.len(),
            table.dim()
        )));
    }
    let mut acc = 0.0;
    for i in 0..table.terms() {
        let dir = table.folded_direction(j - 1, i);
        let mut z = dir[table.dim()];
        for (k, &v) in x.iter().enumerate() {
            z += dir[k] * v;
        }
        acc += table.coefficient(j - 1, i) * sigmoid(z);
    }
    Ok(acc)
}

/// Row and column layout of the sigmoid block input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmoidLayout {
    pub dim: usize,
    pub n_funcs: usize,
    pub enc_width: usize,
}

impl SigmoidLayout {
    pub fn new(dim: usize, n_funcs: usize) -> Result<Self> {
        if n_funcs == 0 || dim == 0 {
            return Err(Error::InvalidInput("empty layout".into()));
        }
        if n_funcs > dim {
            return Err(Error::InvalidInput(format!(
                "at most {dim} encodable functions fit the data band, got {n_funcs}"
            )));
        }
        let cols = (3 * dim).max(2 * dim + 2);
        Ok(Self {
            dim,
            n_funcs,
            enc_width: encoding_width(cols),
        })
    }

    pub fn indicator_col(&self) -> usize {
        0
    }

    pub fn x_col(&self) -> usize {
        self.dim
    }

    pub fn out_col(&self) -> usize {
        2 * self.dim
    }

    pub fn anchor_col(&self) -> usize {
        2 * self.dim + 1
    }

    pub fn total_cols(&self) -> usize {
        (3 * self.dim).max(2 * self.dim + 2)
    }

    pub fn band_a_start(&self) -> usize {
        0
    }

    pub fn band_b_upper_start(&self) -> usize {
        self.dim
    }

    pub fn band_b_lower_start(&self) -> usize {
        2 * self.dim
    }

    pub fn band_c_start(&self) -> usize {
        3 * self.dim
    }

    pub fn band_d_start(&self) -> usize {
        3 * self.dim + self.enc_width
    }

    pub fn sel_row(&self) -> usize {
        3 * self.dim + 2 * self.enc_width
    }

    pub fn ones_row(&self) -> usize {
        self.sel_row() + 1
    }

    pub fn total_rows(&self) -> usize {
        self.ones_row() + 1
    }

    pub fn out_cell(&self) -> (usize, usize) {
        (self.band_a_start(), self.out_col())
    }
}

/// Embeds an explicit indicator vector and input point.
pub fn sigmoid_input_with_indicator(
    layout: &SigmoidLayout,
    indicator: &[f64],
    x: &[f64],
) -> Result<Matrix> {
    if indicator.len() != layout.n_funcs {
        return Err(Error::InvalidIndicator(format!(
            "indicator length {} vs {} functions",
            indicator.len(),
            layout.n_funcs
        )));
    }
    let ones = indicator.iter().filter(|&&v| v == 1.0).count();
    if ones != 1 || indicator.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidIndicator("indicator must be one-hot".into()));
    }
    if x.len() != layout.dim {
        return Err(Error::ShapeError("input dim mismatch".into()));
    }
    let codes = make_binary_encodings(layout.total_cols())?;
    let mut mat = Matrix::zeros(layout.total_rows(), layout.total_cols());
    for (r, &v) in indicator.iter().enumerate() {
        mat.set(layout.band_a_start() + r, layout.indicator_col(), v);
    }
    for (r, &v) in x.iter().enumerate() {
        mat.set(layout.band_a_start() + r, layout.x_col(), v);
    }
    let out_code = codes[layout.out_col()].bits().to_vec();
    for (i, &v) in out_code.iter().enumerate() {
        mat.set(layout.band_c_start() + i, layout.x_col(), v);
    }
    for c in 0..layout.total_cols() {
        if c != layout.x_col() {
            for (i, &v) in codes[c].bits().iter().enumerate() {
                mat.set(layout.band_d_start() + i, c, v);
            }
        }
        mat.set(layout.ones_row(), c, 1.0);
    }
    mat.set(layout.sel_row(), layout.x_col(), 1.0);
    Ok(mat)
}

/// Embeds the one-hot indicator for function `j` (1-based) and the point.
pub fn sigmoid_input(layout: &SigmoidLayout, j: usize, x: &[f64]) -> Result<Matrix> {
    if j == 0 || j > layout.n_funcs {
        return Err(Error::InvalidIndicator(format!(
            "function index {j} out of 1..={}",
            layout.n_funcs
        )));
    }
    let mut e = vec![0.0; layout.n_funcs];
    e[j - 1] = 1.0;
    sigmoid_input_with_indicator(layout, &e, x)
}

/// Score boost pinning the data/anchor pair against every other column.
const PAIR_BOOST: f64 = 1e3;
/// Gate constant of the cleanup units.
const CLEANUP_GATE: f64 = 1e3;

/// Three layers, one head per term: an indicator-copy layer, the m sigmoid
/// heads writing the weighted terms into the output cell, and a cleanup
/// layer restoring the scratch band.
pub fn build_sigmoid_block(table: &FunctionTable, layout: &SigmoidLayout) -> Result<FunctionBlock> {
    if table.dim() != layout.dim || table.n_funcs() != layout.n_funcs {
        return Err(Error::ShapeError("table does not match layout".into()));
    }
    let d = layout.dim;
    let n = layout.n_funcs;
    let rows = layout.total_rows();
    let cols = layout.total_cols();
    let b = layout.enc_width;
    let codes = make_binary_encodings(cols)?;
    let code0 = codes[layout.indicator_col()].bits().to_vec();
    let code_out = codes[layout.out_col()].bits().to_vec();
    let code_anchor = codes[layout.anchor_col()].bits().to_vec();
    let m_enc = b as f64;
    let route = m_enc * m_enc;
    let mut layers = Vec::new();

    // layer 1: route the indicator into the scratch band of the data and
    // output columns; every other column points at the empty anchor. The
    // ReLU drops the input point into the second band at the data column.
    {
        let mut w_k = Matrix::zeros(b, rows);
        for i in 0..b {
            w_k.set(i, layout.band_d_start() + i, 1.0);
        }
        let mut w_q = Matrix::zeros(b, rows);
        for i in 0..b {
            for k in 0..b {
                let toward_source = code0[i] * code_out[k] / m_enc;
                let toward_anchor = -route * code_anchor[i] * code_out[k] / m_enc;
                w_q.set(i, layout.band_c_start() + k, toward_source + toward_anchor);
                w_q.set(i, layout.band_d_start() + k, toward_source + toward_anchor);
            }
            w_q.set(i, layout.ones_row(), route * code_anchor[i]);
        }
        let mut v = Matrix::zeros(rows, rows);
        for i in 0..n {
            v.set(
                layout.band_b_lower_start() + i,
                layout.band_a_start() + i,
                1.0,
            );
        }
        let head = AttentionHead::new(w_k, w_q, v)?;
        let hidden = 2 * d;
        let mut w1 = Matrix::zeros(hidden, rows);
        let mut b1 = Matrix::zeros(hidden, 1);
        let mut w2 = Matrix::zeros(rows, hidden);
        for r in 0..d {
            w1.set(2 * r, layout.band_a_start() + r, 1.0);
            w1.set(2 * r, layout.sel_row(), CLEANUP_GATE);
            b1.set(2 * r, 0, -CLEANUP_GATE);
            w1.set(2 * r + 1, layout.band_a_start() + r, -1.0);
            w1.set(2 * r + 1, layout.sel_row(), CLEANUP_GATE);
            b1.set(2 * r + 1, 0, -CLEANUP_GATE);
            w2.set(layout.band_b_upper_start() + r, 2 * r, 1.0);
            w2.set(layout.band_b_upper_start() + r, 2 * r + 1, -1.0);
        }
        layers.push(TransformerLayer::new(
            vec![head],
            w1,
            b1,
            w2,
            Matrix::zeros(rows, 1),
            Temperature::new(12.0)?,
        )?);
    }

    // layer 2: one head per term at unit temperature
    {
        let mut heads = Vec::new();
        for i in 0..table.terms() {
            let attn = d + 3;
            let mut w_k = Matrix::zeros(attn, rows);
            for r in 0..d {
                w_k.set(r, layout.band_a_start() + r, 1.0);
            }
            w_k.set(d, layout.sel_row(), 1.0);
            for k in 0..b {
                w_k.set(d + 1, layout.band_c_start() + k, code_out[k] / m_enc);
                w_k.set(d + 2, layout.band_d_start() + k, code_anchor[k] / m_enc);
            }
            let mut w_q = Matrix::zeros(attn, rows);
            for dim in 0..=d {
                for jf in 0..n {
                    let dir = table.folded_direction(jf, i);
                    w_q.set(dim, layout.band_b_lower_start() + jf, dir[dim]);
                }
            }
            for k in 0..b {
                w_q.set(
                    d + 1,
                    layout.band_d_start() + k,
                    PAIR_BOOST * code_out[k] / m_enc,
                );
                w_q.set(
                    d + 2,
                    layout.band_d_start() + k,
                    PAIR_BOOST * code_out[k] / m_enc,
                );
            }
            let mut v = Matrix::zeros(rows, rows);
            for jf in 0..n {
                v.set(
                    layout.band_a_start(),
                    layout.band_b_lower_start() + jf,
                    table.coefficient(jf, i),
                );
            }
            heads.push(AttentionHead::new(w_k, w_q, v)?);
        }
        layers.push(TransformerLayer::new(
            heads,
            Matrix::zeros(1, rows),
            Matrix::zeros(1, 1),
            Matrix::zeros(rows, 1),
            Matrix::zeros(rows, 1),
            Temperature::new(1.0)?,
        )?);
    }

    // layer 3: clear the indicator copies from the scratch band
    {
        let hidden = 4 * n;
        let mut w1 = Matrix::zeros(hidden, rows);
        let mut b1 = Matrix::zeros(hidden, 1);
        let mut w2 = Matrix::zeros(rows, hidden);
        for r in 0..n {
            let row = layout.band_b_lower_start() + r;
            let h = 4 * r;
            // at the data column, gated by the selector row
            w1.set(h, row, 1.0);
            w1.set(h, layout.sel_row(), CLEANUP_GATE);
            b1.set(h, 0, -CLEANUP_GATE);
            w2.set(row, h, -1.0);
            // at the output column, gated by its position code
            w1.set(h + 1, row, 1.0);
            for k in 0..b {
                w1.set(h + 1, layout.band_d_start() + k, CLEANUP_GATE * code_out[k]);
                w1.set(h + 2, layout.band_d_start() + k, CLEANUP_GATE * code_out[k]);
            }
            b1.set(h + 1, 0, -CLEANUP_GATE * (m_enc - 1.0));
            b1.set(h + 2, 0, -CLEANUP_GATE * (m_enc - 1.0));
            w2.set(row, h + 1, -1.0);
            w2.set(row, h + 2, 1.0);
            // unused spare keeps indices aligned
            let _ = h + 3;
        }
        layers.push(TransformerLayer::new(
            vec![AttentionHead::inert(rows)],
            w1,
            b1,
            w2,
            Matrix::zeros(rows, 1),
            Temperature::new(1.0)?,
        )?);
    }

    let mut mask = ConsequentialMask::none(rows, cols);
    let (cell_r, cell_c) = layout.out_cell();
    mask.mark_region(cell_r, 1, cell_c, 1);
    mask.mark_region(layout.band_b_upper_start(), d, 0, cols);
    mask.mark_region(layout.band_b_lower_start(), d, 0, cols);
    mask.mark_region(layout.band_c_start(), rows - layout.band_c_start(), 0, cols);
    FunctionBlock::new(
        format!("sigmoid-bank[N={n}, m={}]", table.terms()),
        layers,
        mask,
        1e-9,
        rows,
        cols,
    )
}

/// Expected full-shape output: the reference value in the output cell, the
/// input point moved into the second band, and the encoding rows as given.
pub fn sigmoid_oracle(
    table: &FunctionTable,
    layout: &SigmoidLayout,
    j: usize,
    x: &[f64],
) -> Result<Matrix> {
    let input = sigmoid_input(layout, j, x)?;
    let mut expected = Matrix::zeros(layout.total_rows(), layout.total_cols());
    let (cell_r, cell_c) = layout.out_cell();
    expected.set(cell_r, cell_c, eval_reference(table, j, x)?);
    for (r, &v) in x.iter().enumerate() {
        expected.set(layout.band_b_upper_start() + r, layout.x_col(), v);
    }
    for row in layout.band_c_start()..layout.total_rows() {
        for c in 0..layout.total_cols() {
            expected.set(row, c, input.get(row, c));
        }
    }
    Ok(expected)
}

/// Reserved single-head variant folding all terms into one block-diagonal
/// head. Experimental: the summed scores only equal the multi-head result
/// for a single term; kept as the interface for the folded construction.
pub fn build_sigmoid_block_single_head(
    table: &FunctionTable,
    layout: &SigmoidLayout,
) -> Result<FunctionBlock> {
    if table.terms() != 1 {
        return Err(Error::InvalidInput(
            "single-head folding is only exact for one term".into(),
        ));
    }
    build_sigmoid_block(table, layout)
}

/// Outcome of the fitting procedure.
#[derive(Debug, Clone)]
pub struct SigmoidFit {
    pub table: FunctionTable,
    pub achieved_error: f64,
}

/// Fits `m` sigmoids to samples: greedy residual matching over a candidate
/// pool picks the directions, ridge-solved coefficients weight them, and a
/// short pattern search polishes small fits. A target value at the origin
/// is subtracted first so the fitted function vanishes there.
///
/// Warm-start atoms are kept at the front of the selection, so the error is
/// nonincreasing in `m` on a fixed sample set.
pub fn fit_sigmoid_combination<R: Rng>(
    xs: &[Vec<f64>],
    ys: &[f64],
    m: usize,
    tau_floor: f64,
    box_radius: f64,
    warm_start: Option<&SigmoidFit>,
    rng: &mut R,
) -> Result<SigmoidFit> {
    if m == 0 {
        return Err(Error::InvalidInput("need at least one term".into()));
    }
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::ShapeError("sample shape mismatch".into()));
    }
    let d = xs[0].len();
    let tau = (m as f64).sqrt() * (m as f64).ln().max(1.0);
    let tau = tau.max(tau_floor).max(1.0);

    // center both sides at the origin: targets lose their value at the
    // nearest-to-zero sample and every basis atom loses its own origin
    // value, so the fit vanishes at zero while a pure sigmoid target stays
    // exactly representable
    let origin_value = {
        let mut best = (f64::INFINITY, 0.0);
        for (x, &y) in xs.iter().zip(ys) {
            let norm: f64 = x.iter().map(|v| v * v).sum();
            if norm < best.0 {
                best = (norm, y);
            }
        }
        if best.0 < 1e-18 {
            best.1
        } else {
            0.0
        }
    };
    let targets: Vec<f64> = ys.iter().map(|y| y - origin_value).collect();

    let eval_one = |a: &[f64], b: f64| -> Vec<f64> {
        let at_origin = sigmoid(tau * b);
        xs.iter()
            .map(|x| {
                let z: f64 = a.iter().zip(x).map(|(ai, xi)| ai * xi).sum::<f64>() + b;
                sigmoid(tau * z) - at_origin
            })
            .collect()
    };
    let max_err_of = |basis: &[Vec<f64>], coefs: &[f64]| -> f64 {
        let mut max_err = 0.0f64;
        for s in 0..targets.len() {
            let mut pred = 0.0;
            for (i, c) in coefs.iter().enumerate() {
                pred += c * basis[i][s];
            }
            max_err = max_err.max((pred - targets[s]).abs());
        }
        max_err
    };
    let score = |params: &[(Vec<f64>, f64)]| -> (Vec<f64>, f64) {
        let basis: Vec<Vec<f64>> = params.iter().map(|(a, b)| eval_one(a, *b)).collect();
        let coefs = ridge_solve(&basis, &targets, 1e-10, None);
        let err = max_err_of(&basis, &coefs);
        (coefs, err)
    };

    // candidate pool: warm-start atoms first, then an offset grid along
    // coordinate directions, then random draws
    let mut pool: Vec<(Vec<f64>, f64)> = Vec::new();
    if let Some(prev) = warm_start {
        for i in 0..prev.table.terms().min(m) {
            let folded = prev.table.folded_direction(0, i);
            let scale = folded[..=d]
                .iter()
                .fold(0.0f64, |acc, v| acc.max(v.abs()))
                .max(1.0);
            let a: Vec<f64> = folded[..d].iter().map(|v| v / scale).collect();
            let b = (folded[d] / scale).clamp(-1.0, 1.0);
            pool.push((rescale_direction(&a, box_radius), b));
        }
    }
    let warm_count = pool.len();
    let grid = (2 * m).max(8);
    for g in 0..grid {
        let b = -1.0 + 2.0 * (g as f64 + 0.5) / grid as f64;
        for sign in [1.0, -1.0] {
            for coord in 0..d {
                let mut a = vec![0.0; d];
                a[coord] = sign / box_radius.max(1.0);
                pool.push((rescale_direction(&a, box_radius), b));
            }
        }
    }
    for _ in 0..m {
        let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        pool.push((
            rescale_direction(&raw, box_radius),
            rng.gen_range(-1.0..1.0),
        ));
    }
    let pool_basis: Vec<Vec<f64>> = pool.iter().map(|(a, b)| eval_one(a, *b)).collect();

    // greedy selection: warm-start atoms are kept, the rest maximize
    // residual correlation
    let mut selected: Vec<usize> = (0..warm_count.min(m)).collect();
    let mut params: Vec<(Vec<f64>, f64)> = selected.iter().map(|&i| pool[i].clone()).collect();
    let (mut coefs, mut err) = if params.is_empty() {
        (Vec::new(), f64::INFINITY)
    } else {
        score(&params)
    };
    while params.len() < m {
        // residual of the current fit
        let mut resid = targets.clone();
        for (i, &sel) in selected.iter().enumerate() {
            for s in 0..resid.len() {
                resid[s] -= coefs.get(i).copied().unwrap_or(0.0) * pool_basis[sel][s];
            }
        }
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let mut best = (0usize, -1.0f64);
        for (cand, basis) in pool_basis.iter().enumerate() {
            if selected.contains(&cand) {
                continue;
            }
            let bmean = basis.iter().sum::<f64>() / basis.len() as f64;
            let mut corr = 0.0;
            let mut norm = 1e-12;
            for s in 0..resid.len() {
                corr += (resid[s] - mean) * (basis[s] - bmean);
                norm += (basis[s] - bmean) * (basis[s] - bmean);
            }
            let gain = corr.abs() / norm.sqrt();
            if gain > best.1 {
                best = (cand, gain);
            }
        }
        selected.push(best.0);
        params.push(pool[best.0].clone());
        let (c, e) = score(&params);
        coefs = c;
        err = e;
    }

    // pattern-search polish, kept shallow for large term counts; past
    // sixteen terms the greedy selection plus least squares already lands
    // far below the coarser fits and the polish cost would dominate
    let (depth, passes) = if m <= 2 {
        (40, 6)
    } else if m <= 8 {
        (14, 2)
    } else if m <= 16 {
        (6, 1)
    } else {
        (0, 0)
    };
    for _ in 0..passes {
        for i in 0..m {
            let mut step = 0.25;
            for _ in 0..depth {
                let mut improved = false;
                for coord in 0..=d {
                    for sign in [1.0, -1.0] {
                        let saved = params[i].clone();
                        if coord < d {
                            params[i].0[coord] += sign * step;
                            params[i].0 = rescale_direction(&params[i].0, box_radius);
                        } else {
                            params[i].1 = (params[i].1 + sign * step).clamp(-1.0, 1.0);
                        }
                        let (c, e) = score(&params);
                        if e < err {
                            err = e;
                            coefs = c;
                            improved = true;
                        } else {
                            params[i] = saved;
                        }
                    }
                }
                if !improved {
                    step *= 0.5;
                }
            }
        }
    }

    // reweighted coefficient passes push the largest residual down, which
    // the plain least-squares objective does not see
    {
        let basis: Vec<Vec<f64>> = params.iter().map(|(a, b)| eval_one(a, *b)).collect();
        let mut weights = vec![1.0f64; targets.len()];
        for _ in 0..12 {
            let trial = ridge_solve(&basis, &targets, 1e-10, Some(&weights));
            let trial_err = max_err_of(&basis, &trial);
            if trial_err < err {
                err = trial_err;
                coefs = trial.clone();
            }
            for (s, w) in weights.iter_mut().enumerate() {
                let mut pred = 0.0;
                for (i, c) in trial.iter().enumerate() {
                    pred += c * basis[i][s];
                }
                *w *= (pred - targets[s]).abs() + 1e-12;
            }
            let total: f64 = weights.iter().sum();
            for w in weights.iter_mut() {
                *w *= targets.len() as f64 / total;
            }
        }
    }

    let barron_c = coefs.iter().fold(1.0f64, |acc, c| acc.max(c.abs() / 2.0)) + 1.0;
    let atoms: Vec<Vec<SigmoidAtom>> = vec![params
        .iter()
        .zip(&coefs)
        .map(|((a, b), &c)| {
            SigmoidAtom::new(c, a.clone(), *b, tau, barron_c, box_radius)
                .expect("fitted atom satisfies class bounds by construction")
        })
        .collect()];
    let table = FunctionTable::from_atoms(&atoms, d, barron_c, box_radius)?;
    Ok(SigmoidFit {
        table,
        achieved_error: err,
    })
}

fn rescale_direction(a: &[f64], box_radius: f64) -> Vec<f64> {
    let sup: f64 = box_radius * a.iter().map(|v| v.abs()).sum::<f64>();
    if sup > 1.0 {
        a.iter().map(|v| v / sup).collect()
    } else {
        a.to_vec()
    }
}

/// Ridge-regularized least squares over the basis rows, optionally with
/// per-sample weights.
fn ridge_solve(
    basis: &[Vec<f64>],
    targets: &[f64],
    ridge: f64,
    weights: Option<&[f64]>,
) -> Vec<f64> {
    let m = basis.len();
    let w = |s: usize| weights.map(|w| w[s]).unwrap_or(1.0);
    let mut a = vec![vec![0.0; m + 1]; m];
    for i in 0..m {
        for j in 0..m {
            let mut acc = 0.0;
            for s in 0..targets.len() {
                acc += w(s) * basis[i][s] * basis[j][s];
            }
            a[i][j] = acc + if i == j { ridge } else { 0.0 };
        }
        let mut acc = 0.0;
        for s in 0..targets.len() {
            acc += w(s) * basis[i][s] * targets[s];
        }
        a[i][m] = acc;
    }
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&p, &q| a[p][col].abs().partial_cmp(&a[q][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        let diag = a[col][col];
        if diag.abs() < 1e-300 {
            continue;
        }
        for j in col..=m {
            a[col][j] /= diag;
        }
        for row in 0..m {
            if row != col {
                let f = a[row][col];
                for j in col..=m {
                    a[row][j] -= f * a[col][j];
                }
            }
        }
    }
    (0..m).map(|i| a[i][m]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{block_forward, compare_masked};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_atom(d: usize) -> SigmoidAtom {
        SigmoidAtom::new(1.0, vec![0.0; d], 0.0, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn reference_sigmoid_values() {
        // c = [2], a with x^T a = 0 -> 1.0
        let table = FunctionTable::from_atoms(
            &[vec![
                SigmoidAtom::new(2.0, vec![0.0], 0.0, 1.0, 1.0, 1.0).unwrap()
            ]],
            1,
            1.0,
            1.0,
        )
        .unwrap();
        assert_eq!(eval_reference(&table, 1, &[0.7]).unwrap(), 1.0);

        // saturation
        let table = FunctionTable::from_atoms(
            &[vec![
                SigmoidAtom::new(1.0, vec![1.0], 1.0, 40.0, 1.0, 1.0).unwrap()
            ]],
            1,
            1.0,
            1.0,
        )
        .unwrap();
        let v = eval_reference(&table, 1, &[1.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);

        // logistic closed forms: sigma(ln 3) = 0.75, sigma(-ln 3) = 0.25
        let t3 = 3f64.ln();
        let table = FunctionTable::from_atoms(
            &[vec![
                SigmoidAtom::new(1.0, vec![t3 / 4.0], 0.0, 4.0, 1.0, 1.0).unwrap(),
                SigmoidAtom::new(1.0, vec![-t3 / 4.0], 0.0, 4.0, 1.0, 1.0).unwrap(),
            ]],
            1,
            1.0,
            1.0,
        )
        .unwrap();
        let v = eval_reference(&table, 1, &[1.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reference_rejects_bad_index() {
        let table = FunctionTable::from_atoms(&[vec![zero_atom(2)]], 2, 1.0, 1.0).unwrap();
        assert!(matches!(
            eval_reference(&table, 0, &[0.0, 0.0]),
            Err(Error::InvalidIndicator(_))
        ));
        assert!(matches!(
            eval_reference(&table, 2, &[0.0, 0.0]),
            Err(Error::InvalidIndicator(_))
        ));
    }

    #[test]
    fn block_single_constant_atom() {
        // N=1, m=1, c=1, a=0: output cell holds sigma(0) = 0.5
        let d = 2;
        let table = FunctionTable::from_atoms(&[vec![zero_atom(d)]], d, 1.0, 1.0).unwrap();
        let layout = SigmoidLayout::new(d, 1).unwrap();
        let block = build_sigmoid_block(&table, &layout).unwrap();
        let x = vec![0.3, -0.4];
        let input = sigmoid_input(&layout, 1, &x).unwrap();
        let out = block_forward(&block, &input).unwrap();
        let (r, c) = layout.out_cell();
        assert!((out.get(r, c) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn block_cancellation_pair() {
        // two terms with equal arguments and opposite coefficients
        let d = 2;
        let a1 = SigmoidAtom::new(1.0, vec![0.25, 0.25], 0.1, 2.0, 1.0, 1.0).unwrap();
        let a2 = SigmoidAtom::new(-1.0, vec![0.25, 0.25], 0.1, 2.0, 1.0, 1.0).unwrap();
        let table = FunctionTable::from_atoms(&[vec![a1, a2]], d, 1.0, 1.0).unwrap();
        let layout = SigmoidLayout::new(d, 1).unwrap();
        let block = build_sigmoid_block(&table, &layout).unwrap();
        let input = sigmoid_input(&layout, 1, &[0.5, -0.2]).unwrap();
        let out = block_forward(&block, &input).unwrap();
        let (r, c) = layout.out_cell();
        assert!(out.get(r, c).abs() < 1e-9);
    }

    #[test]
    fn block_matches_reference_on_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for case in 0..25 {
            let d = 2 + case % 3;
            let n = 1 + case % d.min(4);
            let m = 1 + case % 4;
            let mut atoms = Vec::new();
            for _ in 0..n {
                let row: Vec<SigmoidAtom> = (0..m)
                    .map(|_| {
                        let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
                        SigmoidAtom::new(
                            rng.gen_range(-1.5..1.5),
                            rescale_direction(&dir, 1.0),
                            rng.gen_range(-0.9..0.9),
                            rng.gen_range(0.5..3.0),
                            1.0,
                            1.0,
                        )
                        .unwrap()
                    })
                    .collect();
                atoms.push(row);
            }
            let table = FunctionTable::from_atoms(&atoms, d, 1.0, 1.0).unwrap();
            let layout = SigmoidLayout::new(d, n).unwrap();
            let block = build_sigmoid_block(&table, &layout).unwrap();
            let j = 1 + (case % n);
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let input = sigmoid_input(&layout, j, &x).unwrap();
            let expected = sigmoid_oracle(&table, &layout, j, &x).unwrap();
            let out = block_forward(&block, &input).unwrap();
            let rep = compare_masked(&block.name, &out, &expected, &block.mask, block.budget);
            assert!(
                rep.pass,
                "case {case}: error {} at {:?}",
                rep.max_error, rep.worst
            );
        }
    }

    #[test]
    fn indicator_swap_changes_function() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut atoms = Vec::new();
        for _ in 0..2 {
            atoms.push(vec![SigmoidAtom::new(
                rng.gen_range(-1.0..1.0),
                rescale_direction(
                    &(0..d).map(|_| rng.gen_range(-0.5..0.5)).collect::<Vec<_>>(),
                    1.0,
                ),
                0.2,
                2.0,
                1.0,
                1.0,
            )
            .unwrap()]);
        }
        let table = FunctionTable::from_atoms(&atoms, d, 1.0, 1.0).unwrap();
        let layout = SigmoidLayout::new(d, 2).unwrap();
        let block = build_sigmoid_block(&table, &layout).unwrap();
        let x = [0.4, -0.6, 0.1];
        let (r, c) = layout.out_cell();
        for j in 1..=2 {
            let input = sigmoid_input(&layout, j, &x).unwrap();
            let out = block_forward(&block, &input).unwrap();
            let want = eval_reference(&table, j, &x).unwrap();
            assert!((out.get(r, c) - want).abs() < 1e-9, "function {j}");
        }
        // zero indicator rejected
        assert!(matches!(
            sigmoid_input_with_indicator(&layout, &[0.0, 0.0], &x),
            Err(Error::InvalidIndicator(_))
        ));
    }

    #[test]
    fn heads_add_term_by_term() {
        let d = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let row: Vec<SigmoidAtom> = (0..3)
            .map(|_| {
                SigmoidAtom::new(
                    rng.gen_range(-1.0..1.0),
                    rescale_direction(
                        &(0..d).map(|_| rng.gen_range(-0.5..0.5)).collect::<Vec<_>>(),
                        1.0,
                    ),
                    0.0,
                    1.5,
                    1.0,
                    1.0,
                )
                .unwrap()
            })
            .collect();
        let layout = SigmoidLayout::new(d, 1).unwrap();
        let x = [0.3, 0.8];
        let (r, c) = layout.out_cell();
        let full_table =
            FunctionTable::from_atoms(std::slice::from_ref(&row), d, 1.0, 1.0).unwrap();
        let full_block = build_sigmoid_block(&full_table, &layout).unwrap();
        let input = sigmoid_input(&layout, 1, &x).unwrap();
        let full = block_forward(&full_block, &input).unwrap().get(r, c);
        let mut sum = 0.0;
        for atom in &row {
            let table = FunctionTable::from_atoms(&[vec![atom.clone()]], d, 1.0, 1.0).unwrap();
            let block = build_sigmoid_block(&table, &layout).unwrap();
            sum += block_forward(&block, &input).unwrap().get(r, c);
        }
        assert!((full - sum).abs() < 3.0 * 1e-9);
    }

    #[test]
    fn single_head_variant_matches_for_one_term() {
        let d = 2;
        let table = FunctionTable::from_atoms(&[vec![zero_atom(d)]], d, 1.0, 1.0).unwrap();
        let layout = SigmoidLayout::new(d, 1).unwrap();
        let reserved = build_sigmoid_block_single_head(&table, &layout).unwrap();
        let input = sigmoid_input(&layout, 1, &[0.1, 0.2]).unwrap();
        let out = block_forward(&reserved, &input).unwrap();
        let (r, c) = layout.out_cell();
        assert!((out.get(r, c) - 0.5).abs() < 1e-9);
        let two_terms =
            FunctionTable::from_atoms(&[vec![zero_atom(d), zero_atom(d)]], d, 1.0, 1.0).unwrap();
        assert!(build_sigmoid_block_single_head(&two_terms, &layout).is_err());
    }

    #[test]
    fn fitter_recovers_single_admissible_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let tau = 1.0f64.max(1.0);
        let truth = SigmoidAtom::new(1.3, vec![0.6], 0.25, tau, 1.0, 1.0).unwrap();
        let xs: Vec<Vec<f64>> = (0..41).map(|i| vec![-1.0 + i as f64 / 20.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| truth.eval(x)).collect();
        let fit = fit_sigmoid_combination(&xs, &ys, 1, 1.0, 1.0, None, &mut rng).unwrap();
        assert!(fit.achieved_error <= 1e-8, "error {}", fit.achieved_error);
    }

    #[test]
    fn fitter_zero_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let xs: Vec<Vec<f64>> = (0..11).map(|i| vec![-1.0 + i as f64 / 5.0]).collect();
        let ys = vec![0.0; 11];
        let fit = fit_sigmoid_combination(&xs, &ys, 2, 1.0, 1.0, None, &mut rng).unwrap();
        assert!(fit.achieved_error < 1e-9);
        for i in 0..fit.table.terms() {
            assert!(fit.table.coefficient(0, i).abs() < 1e-6);
        }
    }

    #[test]
    fn fitter_error_decreases_in_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let xs: Vec<Vec<f64>> = (0..61).map(|i| vec![-1.0 + i as f64 / 30.0]).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| (std::f64::consts::PI * x[0]).sin())
            .collect();
        let mut prev: Option<SigmoidFit> = None;
        let mut errors = Vec::new();
        for m in [4usize, 16, 64] {
            let fit =
                fit_sigmoid_combination(&xs, &ys, m, 1.0, 1.0, prev.as_ref(), &mut rng).unwrap();
            errors.push(fit.achieved_error);
            prev = Some(fit);
        }
        assert!(
            errors[0] > errors[1] && errors[1] > errors[2],
            "errors {errors:?}"
        );
    }

    #[test]
    fn fitter_rejects_zero_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        assert!(
            fit_sigmoid_combination(&[vec![0.0]], &[0.0], 0, 1.0, 1.0, None, &mut rng).is_err()
        );
    }
}
