//! Atomic weight constructions: pointer-driven copy, an exact binary adder,
//! bit-driven filtering, the zero-indicator layer and the orthogonal
//! subspace attention filter.

use crate::encodings::{encoding_width, make_binary_encodings};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Temperature};
use crate::transformer::{AttentionHead, ConsequentialMask, FunctionBlock, TransformerLayer};

/// Rectangular region in row/column coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionSpec {
    pub row_start: usize,
    pub row_len: usize,
    pub col_start: usize,
    pub col_len: usize,
}

impl RegionSpec {
    pub fn new(row_start: usize, row_len: usize, col_start: usize, col_len: usize) -> Self {
        Self {
            row_start,
            row_len,
            col_start,
            col_len,
        }
    }
}

/// A 0/1 control row together with the dirt tolerance its bits may carry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitRow {
    pub row: usize,
    pub tolerance: f64,
}

/// Default filter constant multiplier over the data bound.
pub const DEFAULT_FILTER_SCALE: f64 = 1e6;
/// Default tolerance for dirty control bits.
pub const DEFAULT_BIT_TOLERANCE: f64 = 1e-9;

/// Temperature that pushes one-hot read/write leakage below `eps`.
///
/// With score margin `margin` and at most `n_max` competing columns of
/// magnitude `c`, leakage is below `n_max * c * e^(-margin * lambda)`; the
/// extra factor 16 absorbs the two-head structure and residual coupling.
pub fn lambda_for(eps: f64, c: f64, margin: f64, n_max: usize) -> Result<Temperature> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "error target must be positive, got {eps}"
        )));
    }
    if !(c > 0.0 && margin > 0.0) {
        return Err(Error::InvalidInput(
            "data bound and margin must be positive".into(),
        ));
    }
    let arg = (16.0 * n_max as f64 * c / eps).max(std::f64::consts::E);
    Temperature::new(arg.ln() / margin)
}

/// Leakage bound of a one-hot read at temperature `lambda`.
pub fn copy_error_bound(lambda: Temperature, n_cols: usize, c: f64) -> f64 {
    16.0 * n_cols as f64 * c * (-2.0 * lambda.lambda()).exp()
}

/// Layout of the copy block input: caller data rows on top, then the
/// current-position code band and two pointer bands, plus one trailing
/// all-zero column the non-participating columns point at.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyLayout {
    pub d_data: usize,
    pub n_cols: usize,
    pub enc_width: usize,
}

impl CopyLayout {
    pub fn new(d_data: usize, n_cols: usize) -> Self {
        Self {
            d_data,
            n_cols,
            enc_width: encoding_width(n_cols + 1),
        }
    }

    pub fn enc_cur_start(&self) -> usize {
        self.d_data
    }

    pub fn enc_read_start(&self) -> usize {
        self.d_data + self.enc_width
    }

    pub fn enc_self_start(&self) -> usize {
        self.d_data + 2 * self.enc_width
    }

    pub fn total_rows(&self) -> usize {
        self.d_data + 3 * self.enc_width
    }

    pub fn total_cols(&self) -> usize {
        self.n_cols + 1
    }

    pub fn null_col(&self) -> usize {
        self.n_cols
    }
}

/// Embeds caller data into the copy layout for a given destination region.
///
/// Destination columns point their read band at the matching source column
/// and their cancel band at themselves; every other column points both
/// bands at the trailing null column.
pub fn copy_input(
    layout: &CopyLayout,
    data: &Matrix,
    src: &RegionSpec,
    dst: &RegionSpec,
) -> Result<Matrix> {
    if data.rows() != layout.d_data || data.cols() != layout.n_cols {
        return Err(Error::ShapeError(format!(
            "data must be {}x{}, got {}x{}",
            layout.d_data,
            layout.n_cols,
            data.rows(),
            data.cols()
        )));
    }
    check_regions(layout, src, dst)?;
    let codes = make_binary_encodings(layout.n_cols + 1)?;
    let mut x = Matrix::zeros(layout.total_rows(), layout.total_cols());
    for c in 0..layout.n_cols {
        for r in 0..layout.d_data {
            x.set(r, c, data.get(r, c));
        }
    }
    let null = layout.null_col();
    for c in 0..layout.total_cols() {
        let in_dst = c >= dst.col_start && c < dst.col_start + dst.col_len && c != null;
        let read_target = if in_dst {
            src.col_start + (c - dst.col_start)
        } else {
            null
        };
        let self_target = if in_dst { c } else { null };
        for (b, &v) in codes[c].bits().iter().enumerate() {
            x.set(layout.enc_cur_start() + b, c, v);
        }
        for (b, &v) in codes[read_target].bits().iter().enumerate() {
            x.set(layout.enc_read_start() + b, c, v);
        }
        for (b, &v) in codes[self_target].bits().iter().enumerate() {
            x.set(layout.enc_self_start() + b, c, v);
        }
    }
    Ok(x)
}

fn check_regions(layout: &CopyLayout, src: &RegionSpec, dst: &RegionSpec) -> Result<()> {
    if src.row_len != dst.row_len || src.col_len != dst.col_len {
        return Err(Error::ShapeError(
            "source and destination regions must have equal dimensions".into(),
        ));
    }
    if src.row_len == 0 || src.col_len == 0 {
        return Err(Error::ShapeError("regions must be non-empty".into()));
    }
    for region in [src, dst] {
        if region.row_start + region.row_len > layout.d_data
            || region.col_start + region.col_len > layout.n_cols
        {
            return Err(Error::ShapeError(
                "region exceeds the data area of the layout".into(),
            ));
        }
    }
    Ok(())
}

fn band_selector(rows: usize, total: usize, start: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, total);
    for r in 0..rows {
        m.set(r, start + r, 1.0);
    }
    m
}

/// One layer, two heads: the read head writes the source band through a
/// pointer-matched one-hot softmax, the second head removes the stale
/// destination content so the residual stream ends up overwritten.
pub fn build_copy_block(
    layout: &CopyLayout,
    src: &RegionSpec,
    dst: &RegionSpec,
    lambda: Temperature,
) -> Result<FunctionBlock> {
    check_regions(layout, src, dst)?;
    let d = layout.total_rows();
    let b = layout.enc_width;
    let keys = band_selector(b, d, layout.enc_cur_start());

    let mut v_read = Matrix::zeros(d, d);
    for i in 0..src.row_len {
        v_read.set(dst.row_start + i, src.row_start + i, 1.0);
    }
    let mut v_cancel = Matrix::zeros(d, d);
    for i in 0..dst.row_len {
        v_cancel.set(dst.row_start + i, dst.row_start + i, -1.0);
    }
    let read = AttentionHead::new(
        keys.clone(),
        band_selector(b, d, layout.enc_read_start()),
        v_read,
    )?;
    let cancel = AttentionHead::new(keys, band_selector(b, d, layout.enc_self_start()), v_cancel)?;
    let layer = TransformerLayer::new(
        vec![read, cancel],
        Matrix::zeros(1, d),
        Matrix::zeros(1, 1),
        Matrix::zeros(d, 1),
        Matrix::zeros(d, 1),
        lambda,
    )?;

    let mut mask = ConsequentialMask::none(d, layout.total_cols());
    mask.mark_region(0, layout.d_data, 0, layout.n_cols);
    let budget = copy_error_bound(lambda, layout.total_cols(), 1.0).max(1e-12);
    FunctionBlock::new(
        format!(
            "copy[{}:{}+{}x{} -> {}:{}+{}x{}]",
            src.row_start,
            src.col_start,
            src.row_len,
            src.col_len,
            dst.row_start,
            dst.col_start,
            dst.row_len,
            dst.col_len
        ),
        vec![layer],
        mask,
        budget,
        d,
        layout.total_cols(),
    )
}

/// The oracle for the copy block: a plain array copy of the region.
pub fn copy_oracle(
    layout: &CopyLayout,
    data: &Matrix,
    src: &RegionSpec,
    dst: &RegionSpec,
) -> Matrix {
    let mut out = Matrix::zeros(layout.total_rows(), layout.total_cols());
    for c in 0..layout.n_cols {
        for r in 0..layout.d_data {
            out.set(r, c, data.get(r, c));
        }
    }
    for i in 0..src.row_len {
        for j in 0..src.col_len {
            out.set(
                dst.row_start + i,
                dst.col_start + j,
                data.get(src.row_start + i, src.col_start + j),
            );
        }
    }
    out
}

/// Layout of the adder input: the two operands' bit rows, then d+1 output
/// rows, least significant bit first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdderLayout {
    pub bits: usize,
    pub n_cols: usize,
}

impl AdderLayout {
    pub fn a_row(&self, i: usize) -> usize {
        i
    }

    pub fn b_row(&self, i: usize) -> usize {
        self.bits + i
    }

    pub fn sum_row(&self, i: usize) -> usize {
        2 * self.bits + i
    }

    pub fn total_rows(&self) -> usize {
        3 * self.bits + 1
    }
}

/// Exact binary adder as a single ReLU layer behind an inert attention head.
///
/// Carries are computed in parallel as thresholds of prefix-weighted sums:
/// carry into bit i+1 is 1 iff sum_{j<=i} 2^j (a_j + b_j) >= 2^(i+1), and
/// an integer threshold 1{t >= 0} is (t+1)_+ - (t)_+. Each output bit then
/// combines one pass-through unit and two threshold units, three
/// activations per bit, under the eight-per-bit allowance.
pub fn build_adder_network(bits: usize, n_cols: usize) -> Result<FunctionBlock> {
    if bits == 0 || bits > 32 {
        return Err(Error::InvalidInput(format!(
            "adder width must be in 1..=32, got {bits}"
        )));
    }
    let layout = AdderLayout { bits, n_cols };
    let d = layout.total_rows();
    // hidden: per bit i: u_i = (a_i + b_i)_+, then per i: v_i = (t_i + 1)_+,
    // w_i = (t_i)_+ with t_i = prefix - 2^(i+1)
    let hidden = 3 * bits;
    let mut w1 = Matrix::with_bound(hidden, d, vec![0.0; hidden * d], 2f64.powi(40))?;
    let mut b1 = Matrix::with_bound(hidden, 1, vec![0.0; hidden], 2f64.powi(40))?;
    for i in 0..bits {
        let u = 3 * i;
        w1.set(u, layout.a_row(i), 1.0);
        w1.set(u, layout.b_row(i), 1.0);
        for j in 0..=i {
            let weight = 2f64.powi(j as i32);
            w1.set(u + 1, layout.a_row(j), weight);
            w1.set(u + 1, layout.b_row(j), weight);
            w1.set(u + 2, layout.a_row(j), weight);
            w1.set(u + 2, layout.b_row(j), weight);
        }
        let threshold = 2f64.powi(i as i32 + 1);
        b1.set(u + 1, 0, 1.0 - threshold);
        b1.set(u + 2, 0, -threshold);
    }
    let mut w2 = Matrix::with_bound(d, hidden, vec![0.0; d * hidden], 2f64.powi(40))?;
    for i in 0..bits {
        let row = layout.sum_row(i);
        let u = 3 * i;
        // s_i = u_i + c_i - 2 c_{i+1}; c_i = v_{i-1} - w_{i-1}, c_0 = 0
        w2.set(row, u, 1.0);
        w2.set(row, u + 1, -2.0);
        w2.set(row, u + 2, 2.0);
        if i > 0 {
            w2.set(row, u - 2, 1.0);
            w2.set(row, u - 1, -1.0);
        }
    }
    let top = layout.sum_row(bits);
    w2.set(top, 3 * (bits - 1) + 1, 1.0);
    w2.set(top, 3 * (bits - 1) + 2, -1.0);

    let layer = TransformerLayer::new(
        vec![AttentionHead::inert(d)],
        w1,
        b1,
        w2,
        Matrix::zeros(d, 1),
        Temperature::new(1.0)?,
    )?;
    let mut mask = ConsequentialMask::none(d, n_cols);
    mask.mark_region(layout.sum_row(0), bits + 1, 0, n_cols);
    FunctionBlock::new(
        format!("adder[{bits} bits]"),
        vec![layer],
        mask,
        1e-12,
        d,
        n_cols,
    )
}

/// Packs integer pairs into adder input columns, 0/1 bit rows.
pub fn adder_input(layout: &AdderLayout, pairs: &[(u64, u64)]) -> Result<Matrix> {
    if pairs.len() != layout.n_cols {
        return Err(Error::ShapeError(format!(
            "expected {} pairs, got {}",
            layout.n_cols,
            pairs.len()
        )));
    }
    let mut x = Matrix::zeros(layout.total_rows(), layout.n_cols);
    for (c, &(a, b)) in pairs.iter().enumerate() {
        if a >= 1 << layout.bits || b >= 1 << layout.bits {
            return Err(Error::InvalidInput(format!(
                "operand does not fit in {} bits",
                layout.bits
            )));
        }
        for i in 0..layout.bits {
            x.set(layout.a_row(i), c, ((a >> i) & 1) as f64);
            x.set(layout.b_row(i), c, ((b >> i) & 1) as f64);
        }
    }
    Ok(x)
}

/// Reads the sum rows of an adder output back as integers.
pub fn adder_read_sums(layout: &AdderLayout, out: &Matrix) -> Vec<u64> {
    (0..layout.n_cols)
        .map(|c| {
            (0..=layout.bits)
                .map(|i| {
                    let bit = out.get(layout.sum_row(i), c);
                    if bit > 0.5 {
                        1u64 << i
                    } else {
                        0
                    }
                })
                .sum()
        })
        .collect()
}

/// Converts a +-1 code to 0/1 bits, the adder-facing convention.
pub fn pm1_to_bits(code: &[f64]) -> Vec<f64> {
    code.iter().map(|&v| (v + 1.0) / 2.0).collect()
}

/// Layout of the bit-filter input: a data band, a same-height copy band and
/// two control rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitFilterLayout {
    pub d_data: usize,
    pub n_cols: usize,
}

impl BitFilterLayout {
    pub fn band1_start(&self) -> usize {
        0
    }

    pub fn band2_start(&self) -> usize {
        self.d_data
    }

    pub fn bit_row(&self) -> usize {
        2 * self.d_data
    }

    pub fn bit_prime_row(&self) -> usize {
        2 * self.d_data + 1
    }

    pub fn total_rows(&self) -> usize {
        2 * self.d_data + 2
    }
}

/// One ReLU layer that zeroes data columns whose control bit is 0.
///
/// The first band is filtered in place through
/// `x + (-C b - x)_+ - (-C b + x)_+`; the second band receives the copy of
/// the first band filtered by the second control row, with the plain
/// `(x)_+ - (-x)_+` pair reconstructing the value the zero band lacks.
pub fn build_bit_filter_layer(
    layout: &BitFilterLayout,
    bit_rows: &[BitRow],
    c: f64,
) -> Result<FunctionBlock> {
    if !(c > 0.0) {
        return Err(Error::InvalidConstant(format!(
            "filter constant must be positive, got {c}"
        )));
    }
    if bit_rows.len() != 2 {
        return Err(Error::InvalidInput(
            "bit filter expects exactly two control rows".into(),
        ));
    }
    for bit in bit_rows {
        if bit.row >= layout.total_rows() {
            return Err(Error::ShapeError("control row out of range".into()));
        }
        if !(bit.tolerance >= 0.0 && bit.tolerance * c < 1.0) {
            return Err(Error::InvalidConstant(format!(
                "bit tolerance {} too large for constant {c}",
                bit.tolerance
            )));
        }
    }
    let d = layout.total_rows();
    let n = layout.d_data;
    // per data row: 2 filter arms for band 1, 2 arms + 2 value arms for band 2
    let hidden = 6 * n;
    let mut w1 = Matrix::with_bound(hidden, d, vec![0.0; hidden * d], 10.0 * c)?;
    let mut w2 = Matrix::zeros(d, hidden);
    for r in 0..n {
        let x_row = layout.band1_start() + r;
        let h = 6 * r;
        // band 1 arms: (-C b - x)_+ and (-C b + x)_+
        w1.set(h, bit_rows[0].row, -c);
        w1.set(h, x_row, -1.0);
        w1.set(h + 1, bit_rows[0].row, -c);
        w1.set(h + 1, x_row, 1.0);
        w2.set(x_row, h, 1.0);
        w2.set(x_row, h + 1, -1.0);
        // band 2 arms against the second control row
        w1.set(h + 2, bit_rows[1].row, -c);
        w1.set(h + 2, x_row, -1.0);
        w1.set(h + 3, bit_rows[1].row, -c);
        w1.set(h + 3, x_row, 1.0);
        // value reconstruction (x)_+ - (-x)_+
        w1.set(h + 4, x_row, 1.0);
        w1.set(h + 5, x_row, -1.0);
        let y_row = layout.band2_start() + r;
        w2.set(y_row, h + 2, 1.0);
        w2.set(y_row, h + 3, -1.0);
        w2.set(y_row, h + 4, 1.0);
        w2.set(y_row, h + 5, -1.0);
    }
    let layer = TransformerLayer::new(
        vec![AttentionHead::inert(d)],
        w1,
        Matrix::zeros(hidden, 1),
        w2,
        Matrix::zeros(d, 1),
        Temperature::new(1.0)?,
    )?;
    let mut mask = ConsequentialMask::none(d, layout.n_cols);
    mask.mark_region(0, 2 * layout.d_data, 0, layout.n_cols);
    FunctionBlock::new("bit-filter", vec![layer], mask, 1e-12, d, layout.n_cols)
}

/// One ReLU layer mapping designated integer rows to 1 at zero entries and
/// 0 at entries of magnitude one or more:
/// `1 - (x)_+ - (-x)_+ + (x-1)_+ + (-x-1)_+`, with the trailing value pair
/// cancelling the residual.
pub fn build_bit_creation_layer(
    d_emb: usize,
    n_cols: usize,
    target_rows: &[usize],
) -> Result<FunctionBlock> {
    if target_rows.iter().any(|&r| r >= d_emb) {
        return Err(Error::ShapeError("target row out of range".into()));
    }
    if target_rows.is_empty() {
        return Err(Error::InvalidInput("no target rows given".into()));
    }
    let hidden = 4 * target_rows.len();
    let mut w1 = Matrix::zeros(hidden, d_emb);
    let mut b1 = Matrix::zeros(hidden, 1);
    let mut w2 = Matrix::zeros(d_emb, hidden);
    let mut b2 = Matrix::zeros(d_emb, 1);
    for (i, &row) in target_rows.iter().enumerate() {
        let h = 4 * i;
        w1.set(h, row, 1.0); // (x)_+
        w1.set(h + 1, row, -1.0); // (-x)_+
        w1.set(h + 2, row, 1.0);
        b1.set(h + 2, 0, -1.0); // (x-1)_+
        w1.set(h + 3, row, -1.0);
        b1.set(h + 3, 0, -1.0); // (-x-1)_+
                                // residual x plus these terms gives the zero indicator:
                                // x + [1 - 2(x)_+ + (-x)_+ - ... ] is folded as 1 - (x)_+ - (-x)_+
                                // + (x-1)_+ + (-x-1)_+ - x, where -x = -(x)_+ + (-x)_+.
        w2.set(row, h, -2.0);
        w2.set(row, h + 2, 1.0);
        w2.set(row, h + 3, 1.0);
        b2.set(row, 0, 1.0);
    }
    let layer = TransformerLayer::new(
        vec![AttentionHead::inert(d_emb)],
        w1,
        b1,
        w2,
        b2,
        Temperature::new(1.0)?,
    )?;
    let mut mask = ConsequentialMask::none(d_emb, n_cols);
    for &row in target_rows {
        mask.mark_region(row, 1, 0, n_cols);
    }
    FunctionBlock::new("bit-creation", vec![layer], mask, 1e-12, d_emb, n_cols)
}

/// Layout for the subspace filter: data rows, then K skill rows, then an
/// output band the same height as the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubspaceLayout {
    pub d_data: usize,
    pub skills: usize,
}

impl SubspaceLayout {
    pub fn skill_start(&self) -> usize {
        self.d_data
    }

    pub fn out_start(&self) -> usize {
        self.d_data + self.skills
    }

    pub fn total_rows(&self) -> usize {
        2 * self.d_data + self.skills
    }
}

/// Attention head whose scores are `C` times the skill-embedding inner
/// product, concentrating each column's weights on same-skill tokens; the
/// value path writes the resulting same-skill mean into the output band.
pub fn build_subspace_filter_head(
    layout: &SubspaceLayout,
    skill_count: usize,
    skill: usize,
    c: f64,
) -> Result<AttentionHead> {
    if skill_count != layout.skills {
        return Err(Error::ShapeError("layout and skill count disagree".into()));
    }
    if skill == 0 || skill > skill_count {
        return Err(Error::InvalidSkill {
            index: skill,
            count: skill_count,
        });
    }
    if !(c > 0.0) {
        return Err(Error::InvalidConstant(format!(
            "subspace constant must be positive, got {c}"
        )));
    }
    let d = layout.total_rows();
    let keys = band_selector(layout.skills, d, layout.skill_start());
    let queries = keys.scale(c);
    let mut v = Matrix::zeros(d, d);
    for r in 0..layout.d_data {
        v.set(layout.out_start() + r, r, 1.0);
    }
    AttentionHead::new(keys, queries, v)
}

/// Embeds tokens with orthonormal skill indicators.
pub fn subspace_input(
    layout: &SubspaceLayout,
    tokens: &Matrix,
    skills: &[usize],
) -> Result<Matrix> {
    if tokens.rows() != layout.d_data || tokens.cols() != skills.len() {
        return Err(Error::ShapeError("token/skill shape mismatch".into()));
    }
    let mut x = Matrix::zeros(layout.total_rows(), tokens.cols());
    for c in 0..tokens.cols() {
        let k = skills[c];
        if k == 0 || k > layout.skills {
            return Err(Error::InvalidSkill {
                index: k,
                count: layout.skills,
            });
        }
        for r in 0..layout.d_data {
            x.set(r, c, tokens.get(r, c));
        }
        x.set(layout.skill_start() + k - 1, c, 1.0);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{attention_weights, block_forward, check_against_oracle};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_data(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn copy_moves_band_between_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let layout = CopyLayout::new(6, 5);
        // token-2's y band (rows 3..6) to token-1's x band (rows 0..3)
        let src = RegionSpec::new(3, 3, 1, 1);
        let dst = RegionSpec::new(0, 3, 0, 1);
        let data = random_data(&mut rng, 6, 5);
        let lambda = lambda_for(1e-6, 1.0, 2.0, layout.total_cols()).unwrap();
        let block = build_copy_block(&layout, &src, &dst, lambda).unwrap();
        let x = copy_input(&layout, &data, &src, &dst).unwrap();
        let expected = copy_oracle(&layout, &data, &src, &dst);
        let report = check_against_oracle(&block, &x, &expected).unwrap();
        assert!(
            report.pass,
            "copy error {} over {}",
            report.max_error, report.budget
        );
        assert!(report.max_error < 1e-6);
    }

    #[test]
    fn self_copy_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layout = CopyLayout::new(4, 4);
        let region = RegionSpec::new(1, 2, 1, 2);
        let data = random_data(&mut rng, 4, 4);
        let lambda = lambda_for(1e-8, 1.0, 2.0, layout.total_cols()).unwrap();
        let block = build_copy_block(&layout, &region, &region, lambda).unwrap();
        let x = copy_input(&layout, &data, &region, &region).unwrap();
        let out = block_forward(&block, &x).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert!((out.get(r, c) - data.get(r, c)).abs() < 2e-8);
            }
        }
    }

    #[test]
    fn zero_source_clears_destination() {
        let layout = CopyLayout::new(4, 3);
        let src = RegionSpec::new(0, 2, 0, 1);
        let dst = RegionSpec::new(2, 2, 2, 1);
        let mut data = Matrix::zeros(4, 3);
        data.set(2, 2, 0.8);
        data.set(3, 2, -0.6);
        let lambda = lambda_for(1e-8, 1.0, 2.0, layout.total_cols()).unwrap();
        let block = build_copy_block(&layout, &src, &dst, lambda).unwrap();
        let x = copy_input(&layout, &data, &src, &dst).unwrap();
        let out = block_forward(&block, &x).unwrap();
        assert!(out.get(2, 2).abs() < 1e-8);
        assert!(out.get(3, 2).abs() < 1e-8);
    }

    #[test]
    fn copy_error_shrinks_with_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = CopyLayout::new(5, 6);
        let src = RegionSpec::new(0, 2, 4, 2);
        let dst = RegionSpec::new(3, 2, 0, 2);
        let data = random_data(&mut rng, 5, 6);
        let expected = copy_oracle(&layout, &data, &src, &dst);
        let x = copy_input(&layout, &data, &src, &dst).unwrap();
        let mut last = f64::INFINITY;
        for lambda in [10.0, 20.0, 40.0, 80.0] {
            let block =
                build_copy_block(&layout, &src, &dst, Temperature::new(lambda).unwrap()).unwrap();
            let out = block_forward(&block, &x).unwrap();
            let mut err = 0.0f64;
            for r in 0..layout.d_data {
                for c in 0..layout.n_cols {
                    err = err.max((out.get(r, c) - expected.get(r, c)).abs());
                }
            }
            assert!(err <= last + 1e-15, "error must not grow with lambda");
            last = err;
        }
        assert!(last < 1e-8);
    }

    #[test]
    fn copy_rejects_mismatched_regions() {
        let layout = CopyLayout::new(4, 4);
        let src = RegionSpec::new(0, 2, 0, 1);
        let dst = RegionSpec::new(0, 3, 0, 1);
        let lambda = Temperature::new(10.0).unwrap();
        assert!(build_copy_block(&layout, &src, &dst, lambda).is_err());
    }

    #[test]
    fn adder_three_plus_five() {
        let block = build_adder_network(4, 1).unwrap();
        let layout = AdderLayout { bits: 4, n_cols: 1 };
        let x = adder_input(&layout, &[(3, 5)]).unwrap();
        let out = block_forward(&block, &x).unwrap();
        assert_eq!(adder_read_sums(&layout, &out), vec![8]);
    }

    #[test]
    fn adder_zero_plus_zero() {
        let block = build_adder_network(4, 1).unwrap();
        let layout = AdderLayout { bits: 4, n_cols: 1 };
        let x = adder_input(&layout, &[(0, 0)]).unwrap();
        let out = block_forward(&block, &x).unwrap();
        assert_eq!(adder_read_sums(&layout, &out), vec![0]);
    }

    #[test]
    fn adder_exhaustive_three_bits() {
        let pairs: Vec<(u64, u64)> = (0..8).flat_map(|a| (0..8).map(move |b| (a, b))).collect();
        let layout = AdderLayout {
            bits: 3,
            n_cols: pairs.len(),
        };
        let block = build_adder_network(3, pairs.len()).unwrap();
        let x = adder_input(&layout, &pairs).unwrap();
        let out = block_forward(&block, &x).unwrap();
        let sums = adder_read_sums(&layout, &out);
        for (i, &(a, b)) in pairs.iter().enumerate() {
            assert_eq!(sums[i], a + b, "{a} + {b}");
        }
        // exactness: the sum rows hold clean 0/1 values
        for c in 0..layout.n_cols {
            for i in 0..=3 {
                let v = out.get(layout.sum_row(i), c);
                assert!((v - v.round()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pm1_conversion() {
        assert_eq!(pm1_to_bits(&[-1.0, 1.0, -1.0]), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn bit_filter_exact_on_clean_bits() {
        let layout = BitFilterLayout {
            d_data: 2,
            n_cols: 3,
        };
        let bits = [
            BitRow {
                row: layout.bit_row(),
                tolerance: 0.0,
            },
            BitRow {
                row: layout.bit_prime_row(),
                tolerance: 0.0,
            },
        ];
        let block = build_bit_filter_layer(&layout, &bits, 1e3).unwrap();
        let mut x = Matrix::zeros(layout.total_rows(), 3);
        let vals = [[0.3, -0.7, 0.9], [-0.2, 0.5, 0.1]];
        for c in 0..3 {
            x.set(0, c, vals[0][c]);
            x.set(1, c, vals[1][c]);
        }
        for (c, b) in [1.0, 0.0, 1.0].iter().enumerate() {
            x.set(layout.bit_row(), c, *b);
        }
        for (c, b) in [0.0, 1.0, 0.0].iter().enumerate() {
            x.set(layout.bit_prime_row(), c, *b);
        }
        let out = block_forward(&block, &x).unwrap();
        // band 1: [a, 0, c] exactly
        assert_eq!(out.get(0, 0), 0.3);
        assert_eq!(out.get(0, 1), 0.0);
        assert_eq!(out.get(0, 2), 0.9);
        assert_eq!(out.get(1, 1), 0.0);
        // band 2 filtered by the second row: only column 1 passes
        assert_eq!(out.get(2, 0), 0.0);
        assert_eq!(out.get(2, 1), -0.7);
        assert_eq!(out.get(3, 1), 0.5);
        assert_eq!(out.get(2, 2), 0.0);
    }

    #[test]
    fn bit_filter_all_ones_is_identity_on_band1() {
        let layout = BitFilterLayout {
            d_data: 3,
            n_cols: 4,
        };
        let bits = [
            BitRow {
                row: layout.bit_row(),
                tolerance: 0.0,
            },
            BitRow {
                row: layout.bit_prime_row(),
                tolerance: 0.0,
            },
        ];
        let block = build_bit_filter_layer(&layout, &bits, 1e3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = Matrix::zeros(layout.total_rows(), 4);
        for c in 0..4 {
            for r in 0..3 {
                x.set(r, c, rng.gen_range(-1.0..1.0));
            }
            x.set(layout.bit_row(), c, 1.0);
        }
        let out = block_forward(&block, &x).unwrap();
        for c in 0..4 {
            for r in 0..3 {
                assert_eq!(out.get(r, c), x.get(r, c));
            }
        }
    }

    #[test]
    fn bit_filter_tolerates_dirty_one() {
        let layout = BitFilterLayout {
            d_data: 1,
            n_cols: 1,
        };
        let bits = [
            BitRow {
                row: layout.bit_row(),
                tolerance: 1e-9,
            },
            BitRow {
                row: layout.bit_prime_row(),
                tolerance: 1e-9,
            },
        ];
        let block = build_bit_filter_layer(&layout, &bits, 1e3).unwrap();
        let mut x = Matrix::zeros(layout.total_rows(), 1);
        x.set(0, 0, 0.7);
        x.set(layout.bit_row(), 0, 1.0 - 1e-9);
        let out = block_forward(&block, &x).unwrap();
        // arms stay inactive: C(1 - delta) well above |x|
        assert_eq!(out.get(0, 0), 0.7);
    }

    #[test]
    fn bit_filter_rejects_bad_constant() {
        let layout = BitFilterLayout {
            d_data: 1,
            n_cols: 1,
        };
        let bits = [
            BitRow {
                row: 2,
                tolerance: 0.0,
            },
            BitRow {
                row: 3,
                tolerance: 0.0,
            },
        ];
        assert!(matches!(
            build_bit_filter_layer(&layout, &bits, 0.0),
            Err(Error::InvalidConstant(_))
        ));
    }

    #[test]
    fn bit_creation_matches_zero_indicator() {
        let block = build_bit_creation_layer(2, 15, &[0]).unwrap();
        let mut x = Matrix::zeros(2, 15);
        for (c, v) in (-7..=7).enumerate() {
            x.set(0, c, v as f64);
        }
        let out = block_forward(&block, &x).unwrap();
        for (c, v) in (-7..=7).enumerate() {
            let expected = if v == 0 { 1.0 } else { 0.0 };
            assert_eq!(out.get(0, c), expected, "indicator at {v}");
        }
    }

    #[test]
    fn bit_creation_examples() {
        let block = build_bit_creation_layer(1, 3, &[0]).unwrap();
        let x = Matrix::new(1, 3, vec![0.0, 1.0, 3.0]).unwrap();
        let out = block_forward(&block, &x).unwrap();
        assert_eq!(out.get(0, 0), 1.0);
        assert_eq!(out.get(0, 1), 0.0);
        assert_eq!(out.get(0, 2), 0.0);
    }

    #[test]
    fn subspace_weights_concentrate() {
        let layout = SubspaceLayout {
            d_data: 2,
            skills: 2,
        };
        let head = build_subspace_filter_head(&layout, 2, 1, 50.0).unwrap();
        let tokens =
            Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![0.5, -0.5, 1.5, -1.5]]).unwrap();
        let x = subspace_input(&layout, &tokens, &[1, 2, 1, 2]).unwrap();
        let w = attention_weights(&head, &x, Temperature::new(1.0).unwrap()).unwrap();
        // query column 0 has skill 1: weights concentrate on columns 0 and 2
        assert!((w.get(0, 0) - 0.5).abs() < 1e-6);
        assert!((w.get(2, 0) - 0.5).abs() < 1e-6);
        assert!(w.get(1, 0) < 1e-12);
        assert!(w.get(3, 0) < 1e-12);
    }

    #[test]
    fn subspace_single_group_is_global_mean() {
        let layout = SubspaceLayout {
            d_data: 1,
            skills: 3,
        };
        let head = build_subspace_filter_head(&layout, 3, 2, 50.0).unwrap();
        let tokens = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let x = subspace_input(&layout, &tokens, &[2, 2, 2]).unwrap();
        let layer = TransformerLayer::new(
            vec![head],
            Matrix::zeros(1, layout.total_rows()),
            Matrix::zeros(1, 1),
            Matrix::zeros(layout.total_rows(), 1),
            Matrix::zeros(layout.total_rows(), 1),
            Temperature::new(1.0).unwrap(),
        )
        .unwrap();
        let out = crate::transformer::attention_forward(&layer, &x).unwrap();
        for c in 0..3 {
            assert!((out.get(layout.out_start(), c) - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn subspace_rejects_bad_skill() {
        let layout = SubspaceLayout {
            d_data: 1,
            skills: 2,
        };
        assert!(matches!(
            build_subspace_filter_head(&layout, 2, 3, 10.0),
            Err(Error::InvalidSkill { .. })
        ));
    }

    #[test]
    fn single_skill_token_takes_all_mass() {
        let layout = SubspaceLayout {
            d_data: 1,
            skills: 2,
        };
        let head = build_subspace_filter_head(&layout, 2, 1, 50.0).unwrap();
        let tokens = Matrix::from_rows(&[vec![5.0, 1.0, 1.0]]).unwrap();
        let x = subspace_input(&layout, &tokens, &[1, 2, 2]).unwrap();
        let w = attention_weights(&head, &x, Temperature::new(1.0).unwrap()).unwrap();
        assert!((w.get(0, 0) - 1.0).abs() < 1e-12);
    }
}
