//! Encoder-layer forward pass and the function-block abstraction.
//!
//! A layer is multi-head attention with residual followed by a one-hidden
//! ReLU MLP with residual; heads are summed, never concatenated, because the
//! weight programs rely on additive cancellation between heads. A
//! `FunctionBlock` is an ordered stack of layers together with its I/O
//! contract: the entries it guarantees (the consequential mask) and the
//! error budget on them.

use crate::error::{Error, Result};
use crate::numerics::{relu, temp_softmax, Matrix, Temperature};

/// One attention head: shared-dimension key/query maps plus a value map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub w_k: Matrix,
    pub w_q: Matrix,
    pub w_v: Matrix,
}

impl AttentionHead {
    pub fn new(w_k: Matrix, w_q: Matrix, w_v: Matrix) -> Result<Self> {
        if w_k.rows() != w_q.rows() {
            return Err(Error::ShapeError(format!(
                "key/query attention dims differ: {} vs {}",
                w_k.rows(),
                w_q.rows()
            )));
        }
        let d = w_v.cols();
        if w_k.cols() != d || w_q.cols() != d || w_v.rows() != d {
            return Err(Error::ShapeError(
                "key/query/value maps disagree on embedding width".into(),
            ));
        }
        Ok(Self { w_k, w_q, w_v })
    }

    /// Head that contributes nothing; keeps layers that only use their MLP
    /// within the H >= 1 architecture shape.
    pub fn inert(d_emb: usize) -> Self {
        Self {
            w_k: Matrix::zeros(1, d_emb),
            w_q: Matrix::zeros(1, d_emb),
            w_v: Matrix::zeros(d_emb, d_emb),
        }
    }

    pub fn embedding_width(&self) -> usize {
        self.w_v.cols()
    }
}

/// One transformer layer with its own softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub heads: Vec<AttentionHead>,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub lambda: Temperature,
}

impl TransformerLayer {
    pub fn new(
        heads: Vec<AttentionHead>,
        w1: Matrix,
        b1: Matrix,
        w2: Matrix,
        b2: Matrix,
        lambda: Temperature,
    ) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::ShapeError("a layer needs at least one head".into()));
        }
        let d = heads[0].embedding_width();
        if heads.iter().any(|h| h.embedding_width() != d) {
            return Err(Error::ShapeError(
                "heads disagree on embedding width".into(),
            ));
        }
        if w1.cols() != d || w2.rows() != d || w2.cols() != w1.rows() {
            return Err(Error::ShapeError(format!(
                "mlp must map {d} -> hidden -> {d}, got w1 {}x{}, w2 {}x{}",
                w1.rows(),
                w1.cols(),
                w2.rows(),
                w2.cols()
            )));
        }
        if b1.rows() != w1.rows() || b1.cols() != 1 || b2.rows() != d || b2.cols() != 1 {
            return Err(Error::ShapeError("bias shapes do not match mlp".into()));
        }
        Ok(Self {
            heads,
            w1,
            b1,
            w2,
            b2,
            lambda,
        })
    }

    /// Layer whose attention part is a single inert head and whose MLP is
    /// zero; forwards reduce to the identity.
    pub fn identity(d_emb: usize) -> Self {
        Self {
            heads: vec![AttentionHead::inert(d_emb)],
            w1: Matrix::zeros(1, d_emb),
            b1: Matrix::zeros(1, 1),
            w2: Matrix::zeros(d_emb, 1),
            b2: Matrix::zeros(d_emb, 1),
            lambda: Temperature::new(1.0).expect("1.0 is a valid temperature"),
        }
    }

    pub fn embedding_width(&self) -> usize {
        self.heads[0].embedding_width()
    }
}

/// Boolean mask marking the output entries a block contractually guarantees.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsequentialMask {
    rows: usize,
    cols: usize,
    flags: Vec<bool>,
}

impl ConsequentialMask {
    pub fn new(rows: usize, cols: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != rows * cols {
            return Err(Error::ShapeError("mask shape mismatch".into()));
        }
        if !flags.iter().any(|&f| f) {
            return Err(Error::InvalidInput(
                "mask must mark at least one entry".into(),
            ));
        }
        Ok(Self { rows, cols, flags })
    }

    pub fn none(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            flags: vec![false; rows * cols],
        }
    }

    /// Marks a rectangular region as consequential.
    pub fn mark_region(&mut self, row0: usize, rows: usize, col0: usize, cols: usize) {
        for r in row0..row0 + rows {
            for c in col0..col0 + cols {
                self.flags[r * self.cols + c] = true;
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_marked(&self, r: usize, c: usize) -> bool {
        self.flags[r * self.cols + c]
    }

    pub fn count_marked(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// A stack of layers plus its I/O contract.
#[derive(Debug, Clone)]
pub struct FunctionBlock {
    pub name: String,
    pub layers: Vec<TransformerLayer>,
    pub mask: ConsequentialMask,
    pub budget: f64,
    pub input_rows: usize,
    pub input_cols: usize,
}

impl FunctionBlock {
    pub fn new(
        name: impl Into<String>,
        layers: Vec<TransformerLayer>,
        mask: ConsequentialMask,
        budget: f64,
        input_rows: usize,
        input_cols: usize,
    ) -> Result<Self> {
        if !(budget > 0.0) {
            return Err(Error::InvalidInput("block budget must be positive".into()));
        }
        if mask.rows() != input_rows || mask.cols() != input_cols {
            return Err(Error::ShapeError(
                "mask shape must match the block output shape".into(),
            ));
        }
        if layers.iter().any(|l| l.embedding_width() != input_rows) {
            return Err(Error::ShapeError(
                "layer embedding width must match the block input rows".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            layers,
            mask,
            budget,
            input_rows,
            input_cols,
        })
    }
}

/// Per-block comparison of a forward output against an oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub block: String,
    pub max_error: f64,
    pub budget: f64,
    pub pass: bool,
    /// Coordinates of the worst masked entry.
    pub worst: Option<(usize, usize)>,
}

/// Softmax weight matrix of a single head; column `j` holds the
/// distribution token `j` attends with.
pub fn attention_weights(head: &AttentionHead, x: &Matrix, lambda: Temperature) -> Result<Matrix> {
    let keys = head.w_k.mul(x)?;
    let queries = head.w_q.mul(x)?;
    let scores = keys.transposed().mul(&queries)?;
    temp_softmax(&scores, lambda)
}

/// Attention sublayer: `x + sum_h W_V^h x softmax((W_K^h x)^T W_Q^h x)`.
pub fn attention_forward(layer: &TransformerLayer, x: &Matrix) -> Result<Matrix> {
    let d = layer.embedding_width();
    if x.rows() != d {
        return Err(Error::ShapeError(format!(
            "input has {} rows, layer expects embedding width {d}",
            x.rows()
        )));
    }
    let mut out = x.clone();
    for head in &layer.heads {
        // a zero value map contributes nothing for any softmax outcome
        if head.w_v.max_abs() == 0.0 {
            continue;
        }
        let keys = head.w_k.mul(x)?;
        let queries = head.w_q.mul(x)?;
        let scores = keys.transposed().mul(&queries)?;
        let weights = temp_softmax(&scores, layer.lambda)?;
        let values = head.w_v.mul(x)?;
        out = out.add(&values.mul(&weights)?)?;
    }
    Ok(out)
}

/// Full layer: attention, then `a + W2 relu(W1 a + b1 1^T) + b2 1^T`.
pub fn layer_forward(layer: &TransformerLayer, x: &Matrix) -> Result<Matrix> {
    let a = attention_forward(layer, x)?;
    let n = a.cols();
    let mut pre = layer.w1.mul(&a)?;
    for r in 0..pre.rows() {
        let b = layer.b1.get(r, 0);
        for c in 0..n {
            pre.set(r, c, pre.get(r, c) + b);
        }
    }
    let hidden = relu(&pre);
    let mut out = a.add(&layer.w2.mul(&hidden)?)?;
    for r in 0..out.rows() {
        let b = layer.b2.get(r, 0);
        if b != 0.0 {
            for c in 0..n {
                out.set(r, c, out.get(r, c) + b);
            }
        }
    }
    Ok(out)
}

/// Runs the block's layers in order.
pub fn block_forward(block: &FunctionBlock, x: &Matrix) -> Result<Matrix> {
    if x.rows() != block.input_rows || x.cols() != block.input_cols {
        return Err(Error::LayoutError(format!(
            "block `{}` expects {}x{}, got {}x{}",
            block.name,
            block.input_rows,
            block.input_cols,
            x.rows(),
            x.cols()
        )));
    }
    let mut cur = x.clone();
    for layer in &block.layers {
        cur = layer_forward(layer, &cur)?;
    }
    Ok(cur)
}

/// Runs the block and compares masked entries against `expected`.
pub fn check_against_oracle(
    block: &FunctionBlock,
    x: &Matrix,
    expected: &Matrix,
) -> Result<VerificationReport> {
    if expected.rows() != block.mask.rows() || expected.cols() != block.mask.cols() {
        return Err(Error::ShapeError(
            "expected output must match the mask shape".into(),
        ));
    }
    let out = block_forward(block, x)?;
    Ok(compare_masked(
        &block.name,
        &out,
        expected,
        &block.mask,
        block.budget,
    ))
}

/// Masked comparison shared by the oracle check and the verification suites.
pub fn compare_masked(
    name: &str,
    out: &Matrix,
    expected: &Matrix,
    mask: &ConsequentialMask,
    budget: f64,
) -> VerificationReport {
    let mut max_error = 0.0f64;
    let mut worst = None;
    for r in 0..mask.rows() {
        for c in 0..mask.cols() {
            if !mask.is_marked(r, c) {
                continue;
            }
            let err = (out.get(r, c) - expected.get(r, c)).abs();
            if err > max_error || worst.is_none() {
                max_error = err;
                worst = Some((r, c));
            }
        }
    }
    VerificationReport {
        block: name.to_string(),
        max_error,
        budget,
        pass: max_error <= budget,
        worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encodings::make_binary_encodings;

    fn layer_with(heads: Vec<AttentionHead>, d: usize, lambda: f64) -> TransformerLayer {
        TransformerLayer::new(
            heads,
            Matrix::zeros(1, d),
            Matrix::zeros(1, 1),
            Matrix::zeros(d, 1),
            Matrix::zeros(d, 1),
            Temperature::new(lambda).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_value_head_is_identity() {
        let d = 3;
        let layer = layer_with(vec![AttentionHead::inert(d)], d, 1.0);
        let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.25], vec![3.0, 0.0]]).unwrap();
        let out = attention_forward(&layer, &x).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn zero_input_stays_zero() {
        let d = 2;
        let head = AttentionHead::new(
            Matrix::identity(d),
            Matrix::identity(d),
            Matrix::identity(d),
        )
        .unwrap();
        let layer = layer_with(vec![head], d, 1.0);
        let x = Matrix::zeros(d, 4);
        let out = attention_forward(&layer, &x).unwrap();
        assert_eq!(out, Matrix::zeros(d, 4));
    }

    /// Two heads that each attend one-hot to the own column via binary
    /// encodings, with opposite value matrices: contributions cancel and the
    /// residual passes through. This is the cancellation pattern used by the
    /// read/write constructions.
    #[test]
    fn opposite_identity_heads_cancel() {
        let n = 4;
        let enc = make_binary_encodings(n).unwrap();
        let width = enc[0].bits().len();
        let d = 2 + width;
        // data rows 0..2, encoding rows 2..2+width
        let mut x = Matrix::zeros(d, n);
        let vals = [[0.7, -0.3, 0.9, 0.1], [0.2, 0.8, -0.5, 0.4]];
        for c in 0..n {
            x.set(0, c, vals[0][c]);
            x.set(1, c, vals[1][c]);
            for (b, &v) in enc[c].bits().iter().enumerate() {
                x.set(2 + b, c, v);
            }
        }
        // keys = queries = encoding rows -> diagonal-dominant scores
        let mut sel = Matrix::zeros(width, d);
        for b in 0..width {
            sel.set(b, 2 + b, 1.0);
        }
        let mut v_plus = Matrix::zeros(d, d);
        v_plus.set(0, 0, 1.0);
        v_plus.set(1, 1, 1.0);
        let v_minus = v_plus.scale(-1.0);
        let h1 = AttentionHead::new(sel.clone(), sel.clone(), v_plus).unwrap();
        let h2 = AttentionHead::new(sel.clone(), sel, v_minus).unwrap();
        let layer = layer_with(vec![h1, h2], d, 40.0);
        let out = attention_forward(&layer, &x).unwrap();
        assert!(out.max_abs_diff(&x).unwrap() < 1e-9);
    }

    #[test]
    fn mlp_two_relu_arms_cancel_rows() {
        // identity-passing attention, MLP computes -(x)_+ + (-x)_+ = -x
        let d = 2;
        let mut w1 = Matrix::zeros(2 * d, d);
        let mut w2 = Matrix::zeros(d, 2 * d);
        for r in 0..d {
            w1.set(2 * r, r, 1.0);
            w1.set(2 * r + 1, r, -1.0);
            w2.set(r, 2 * r, -1.0);
            w2.set(r, 2 * r + 1, 1.0);
        }
        let layer = TransformerLayer::new(
            vec![AttentionHead::inert(d)],
            w1,
            Matrix::zeros(2 * d, 1),
            w2,
            Matrix::zeros(d, 1),
            Temperature::new(1.0).unwrap(),
        )
        .unwrap();
        let x = Matrix::from_rows(&[vec![1.5, -2.0, 0.0], vec![-0.25, 4.0, -1.0]]).unwrap();
        let out = layer_forward(&layer, &x).unwrap();
        assert_eq!(out, Matrix::zeros(d, 3));
    }

    #[test]
    fn bias_broadcast_on_zero_input() {
        let d = 3;
        let c = 2.5;
        let mut b2 = Matrix::zeros(d, 1);
        for r in 0..d {
            b2.set(r, 0, c);
        }
        let layer = TransformerLayer::new(
            vec![AttentionHead::inert(d)],
            Matrix::zeros(1, d),
            Matrix::zeros(1, 1),
            Matrix::zeros(d, 1),
            b2,
            Temperature::new(1.0).unwrap(),
        )
        .unwrap();
        let out = layer_forward(&layer, &Matrix::zeros(d, 5)).unwrap();
        for col in 0..5 {
            for r in 0..d {
                assert_eq!(out.get(r, col), c);
            }
        }
    }

    #[test]
    fn empty_block_is_identity() {
        let mut mask = ConsequentialMask::none(2, 2);
        mask.mark_region(0, 2, 0, 2);
        let block = FunctionBlock::new("noop", vec![], mask, 1e-9, 2, 2).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(block_forward(&block, &x).unwrap(), x);
    }

    #[test]
    fn block_rejects_layout_mismatch() {
        let mut mask = ConsequentialMask::none(2, 2);
        mask.mark_region(0, 1, 0, 1);
        let block = FunctionBlock::new("noop", vec![], mask, 1.0, 2, 2).unwrap();
        let x = Matrix::zeros(3, 2);
        assert!(matches!(
            block_forward(&block, &x),
            Err(Error::LayoutError(_))
        ));
    }

    #[test]
    fn oracle_report_boundary_and_failure() {
        let mut mask = ConsequentialMask::none(1, 2);
        mask.mark_region(0, 1, 0, 2);
        let budget = 1e-3;
        let block = FunctionBlock::new("probe", vec![], mask, budget, 1, 2).unwrap();
        let x = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();

        let same = check_against_oracle(&block, &x, &x).unwrap();
        assert!(same.pass);
        assert_eq!(same.max_error, 0.0);

        let near = Matrix::new(1, 2, vec![1.0 + budget / 2.0, 2.0]).unwrap();
        let rep = check_against_oracle(&block, &x, &near).unwrap();
        assert!(rep.pass);

        let far = Matrix::new(1, 2, vec![1.0, 2.0 + 2.0 * budget]).unwrap();
        let rep = check_against_oracle(&block, &x, &far).unwrap();
        assert!(!rep.pass);
        assert_eq!(rep.worst, Some((0, 1)));
    }

    #[test]
    fn forward_is_deterministic() {
        let d = 4;
        let head = AttentionHead::new(
            Matrix::from_rows(&[vec![0.3, -0.2, 0.5, 0.0], vec![0.1, 0.9, -0.4, 0.2]]).unwrap(),
            Matrix::from_rows(&[vec![-0.6, 0.1, 0.2, 0.7], vec![0.4, 0.0, -0.3, 0.5]]).unwrap(),
            Matrix::identity(d),
        )
        .unwrap();
        let layer = layer_with(vec![head], d, 2.5);
        let x = Matrix::from_rows(&[
            vec![0.3, -1.2, 0.8],
            vec![1.1, 0.4, -0.6],
            vec![-0.9, 0.2, 0.5],
            vec![0.0, 0.7, -0.3],
        ])
        .unwrap();
        let a = layer_forward(&layer, &x).unwrap();
        let b = layer_forward(&layer, &x).unwrap();
        assert_eq!(a, b);
    }
}
