//! Binary positional encodings and assembly of the chain-of-thought input
//! matrix.
//!
//! Positions are encoded as +-1 bit vectors so that every code's self inner
//! product strictly exceeds its inner product with any other code by at
//! least 2. That margin is what lets a large-temperature softmax turn
//! encoding matches into one-hot attention columns.

use crate::cot::CotPrompt;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// A +-1 positional code.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryEncoding {
    bits: Vec<f64>,
}

impl BinaryEncoding {
    pub fn bits(&self) -> &[f64] {
        &self.bits
    }

    pub fn width(&self) -> usize {
        self.bits.len()
    }

    pub fn dot(&self, other: &BinaryEncoding) -> f64 {
        self.bits.iter().zip(&other.bits).map(|(a, b)| a * b).sum()
    }
}

/// Width needed to host `n_max` distinct codes.
pub fn encoding_width(n_max: usize) -> usize {
    let mut b = 1usize;
    while (1usize << b) < n_max {
        b += 1;
    }
    b
}

/// Builds `n_max` distinct +-1 codes of width `ceil(log2(n_max))`.
///
/// Code `i` is the binary expansion of `i` with 0 mapped to -1. Distinct
/// codes differ in at least one bit, so their inner product is at most
/// `width - 2` while every self product equals `width`.
pub fn make_binary_encodings(n_max: usize) -> Result<Vec<BinaryEncoding>> {
    if n_max == 0 {
        return Err(Error::InvalidInput(
            "cannot build encodings for zero positions".into(),
        ));
    }
    let width = encoding_width(n_max);
    Ok((0..n_max)
        .map(|i| BinaryEncoding {
            bits: (0..width)
                .map(|b| if (i >> b) & 1 == 1 { 1.0 } else { -1.0 })
                .collect(),
        })
        .collect())
}

/// Row schema of the chain-of-thought input matrix.
///
/// Column count is `n (L+1) + ell`; rows hold, in order: the data band, a
/// zero scratch band of the same height, two copies of the layer-cycle row,
/// the enumeration row, its elementwise log, the test indicator row, the
/// all-ones row, and the auxiliary band (position codes, a broadcast-source
/// pointer code, the anchor/operand markers and the scratch rows used by the
/// in-network multiplication).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptLayout {
    /// Height of each data band.
    pub d_data: usize,
    /// MLP depth L; demo chains carry L+1 tokens each.
    pub depth: usize,
    /// Number of demonstration chains.
    pub n_chains: usize,
    /// Step index currently being predicted (1-based).
    pub ell: usize,
    /// Maximum sequence length the encodings can address.
    pub n_max: usize,
    /// Width of one binary position code.
    pub enc_width: usize,
}

impl PromptLayout {
    pub fn new(
        d_data: usize,
        depth: usize,
        n_chains: usize,
        ell: usize,
        n_max: usize,
    ) -> Result<Self> {
        let layout = Self {
            d_data,
            depth,
            n_chains,
            ell,
            n_max,
            enc_width: encoding_width(n_max),
        };
        if layout.total_cols() > n_max {
            return Err(Error::CapacityError {
                n: layout.total_cols(),
                max: n_max,
            });
        }
        Ok(layout)
    }

    pub fn total_cols(&self) -> usize {
        self.n_chains * (self.depth + 1) + self.ell
    }

    pub fn band1_start(&self) -> usize {
        0
    }

    pub fn band2_start(&self) -> usize {
        self.d_data
    }

    pub fn cycle_a_row(&self) -> usize {
        2 * self.d_data
    }

    pub fn cycle_b_row(&self) -> usize {
        2 * self.d_data + 1
    }

    pub fn enum_row(&self) -> usize {
        2 * self.d_data + 2
    }

    pub fn ln_row(&self) -> usize {
        2 * self.d_data + 3
    }

    pub fn indicator_row(&self) -> usize {
        2 * self.d_data + 4
    }

    pub fn ones_row(&self) -> usize {
        2 * self.d_data + 5
    }

    pub fn enc_cur_start(&self) -> usize {
        2 * self.d_data + 6
    }

    pub fn enc_dst_start(&self) -> usize {
        self.enc_cur_start() + self.enc_width
    }

    pub fn anchor_marker_row(&self) -> usize {
        self.enc_dst_start() + self.enc_width
    }

    pub fn operand_marker_row(&self) -> usize {
        self.anchor_marker_row() + 1
    }

    pub fn scratch_operand_row(&self) -> usize {
        self.anchor_marker_row() + 2
    }

    pub fn scratch_len_row(&self) -> usize {
        self.anchor_marker_row() + 3
    }

    pub fn scratch_frac_row(&self) -> usize {
        self.anchor_marker_row() + 4
    }

    pub fn scratch_prod_row(&self) -> usize {
        self.anchor_marker_row() + 5
    }

    pub fn scratch_step_row(&self) -> usize {
        self.anchor_marker_row() + 6
    }

    pub fn scratch_step_next_row(&self) -> usize {
        self.anchor_marker_row() + 7
    }

    pub fn total_rows(&self) -> usize {
        self.anchor_marker_row() + 8
    }

    /// Layer-cycle value of a column: demo chains repeat 1..=L+1; the test
    /// segment counts 1..=ell.
    pub fn cycle_value(&self, col: usize) -> usize {
        let chain_len = self.depth + 1;
        let demo_cols = self.n_chains * chain_len;
        if col < demo_cols {
            col % chain_len + 1
        } else {
            col - demo_cols + 1
        }
    }

    /// Column of demo chain `i`'s token at cycle value `c` (both 0-based
    /// chain index, 1-based cycle).
    pub fn demo_token_col(&self, chain: usize, cycle: usize) -> usize {
        chain * (self.depth + 1) + (cycle - 1)
    }

    /// Column of the test-segment token at cycle value `c`.
    pub fn test_token_col(&self, cycle: usize) -> usize {
        self.n_chains * (self.depth + 1) + (cycle - 1)
    }
}

/// Assembles the full input matrix for predicting step `ell`.
pub fn assemble_cot_input(prompt: &CotPrompt, ell: usize) -> Result<Matrix> {
    let layout = prompt.layout(ell)?;
    let n = layout.total_cols();
    let width = layout.enc_width;
    let codes = make_binary_encodings(layout.n_max)?;
    let mut x = Matrix::zeros(layout.total_rows(), n);

    let write_token = |x: &mut Matrix, col: usize, token: &[f64]| {
        for (r, &v) in token.iter().enumerate() {
            x.set(layout.band1_start() + r, col, v);
        }
    };
    for (i, chain) in prompt.chains().iter().enumerate() {
        for (step, token) in chain.iter().enumerate() {
            write_token(&mut x, layout.demo_token_col(i, step + 1), token);
        }
    }
    write_token(&mut x, layout.test_token_col(1), prompt.test_input());
    for (p, pred) in prompt.predictions().iter().enumerate() {
        write_token(&mut x, layout.test_token_col(p + 2), pred);
    }

    for col in 0..n {
        let cyc = layout.cycle_value(col) as f64;
        x.set(layout.cycle_a_row(), col, cyc);
        x.set(layout.cycle_b_row(), col, cyc);
        x.set(layout.enum_row(), col, (col + 1) as f64);
        x.set(layout.ln_row(), col, ((col + 1) as f64).ln());
        let is_test = col >= layout.n_chains * (layout.depth + 1);
        x.set(layout.indicator_row(), col, if is_test { 1.0 } else { 0.0 });
        x.set(layout.ones_row(), col, 1.0);
        for (b, &v) in codes[col].bits().iter().enumerate() {
            x.set(layout.enc_cur_start() + b, col, v);
        }
        // Every column points at column 3, the broadcast source of the
        // extracted step identifier.
        for (b, &v) in codes[2].bits().iter().enumerate() {
            x.set(layout.enc_dst_start() + b, col, v);
        }
    }
    let _ = width;
    x.set(layout.anchor_marker_row(), 0, 1.0);
    x.set(layout.operand_marker_row(), 1, 1.0);
    Ok(x)
}

/// The filtering oracle: zeros everywhere except step `ell-1` features in
/// the first data band and step `ell` features in the second band.
pub fn ideal_filtered(prompt: &CotPrompt, ell: usize) -> Result<Matrix> {
    let layout = prompt.layout(ell)?;
    let mut out = Matrix::zeros(2 * layout.d_data, layout.total_cols());
    let write = |out: &mut Matrix, band: usize, col: usize, token: &[f64]| {
        for (r, &v) in token.iter().enumerate() {
            out.set(band + r, col, v);
        }
    };
    for (i, chain) in prompt.chains().iter().enumerate() {
        // chain token at index s has cycle value s+1; cycle ell is s^{ell-1}.
        write(
            &mut out,
            layout.band1_start(),
            layout.demo_token_col(i, ell),
            &chain[ell - 1],
        );
        write(
            &mut out,
            layout.band2_start(),
            layout.demo_token_col(i, ell + 1),
            &chain[ell],
        );
    }
    // Test segment: the latest prediction (or the test input when ell = 1)
    // carries cycle value ell; nothing in the test segment has cycle ell+1.
    let test_token = if ell == 1 {
        prompt.test_input()
    } else {
        &prompt.predictions()[ell - 2]
    };
    write(
        &mut out,
        layout.band1_start(),
        layout.test_token_col(ell),
        test_token,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cot::{CotPrompt, MlpTask};
    use crate::numerics::LeakyAlpha;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_position_codes() {
        let enc = make_binary_encodings(2).unwrap();
        assert_eq!(enc[0].bits(), &[-1.0]);
        assert_eq!(enc[1].bits(), &[1.0]);
        assert_eq!(enc[0].dot(&enc[0]), 1.0);
        assert_eq!(enc[0].dot(&enc[1]), -1.0);
    }

    #[test]
    fn four_position_gram() {
        let enc = make_binary_encodings(4).unwrap();
        assert_eq!(enc[0].width(), 2);
        for i in 0..4 {
            for j in 0..4 {
                let dot = enc[i].dot(&enc[j]);
                if i == j {
                    assert_eq!(dot, 2.0);
                } else {
                    assert!(dot <= 0.0);
                }
            }
        }
    }

    #[test]
    fn five_position_gram() {
        let enc = make_binary_encodings(5).unwrap();
        assert_eq!(enc[0].width(), 3);
        for i in 0..5 {
            for j in 0..5 {
                let dot = enc[i].dot(&enc[j]);
                if i == j {
                    assert_eq!(dot, 3.0);
                } else {
                    assert!(dot <= 1.0);
                }
            }
        }
    }

    #[test]
    fn zero_positions_rejected() {
        assert!(make_binary_encodings(0).is_err());
    }

    fn tiny_prompt(n: usize, depth: usize, d: usize, seed: u64) -> CotPrompt {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = vec![d; depth + 1];
        let task = MlpTask::random(&dims, LeakyAlpha::new(0.5).unwrap(), &mut rng).unwrap();
        CotPrompt::generate(&task, n, 64, &mut rng).unwrap()
    }

    #[test]
    fn minimal_assembly_layout() {
        let prompt = tiny_prompt(1, 1, 2, 7);
        let x = assemble_cot_input(&prompt, 1).unwrap();
        let layout = prompt.layout(1).unwrap();
        assert_eq!(layout.total_cols(), 3);
        let cyc: Vec<f64> = (0..3).map(|c| x.get(layout.cycle_a_row(), c)).collect();
        assert_eq!(cyc, vec![1.0, 2.0, 1.0]);
        let ind: Vec<f64> = (0..3).map(|c| x.get(layout.indicator_row(), c)).collect();
        assert_eq!(ind, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn seven_column_assembly() {
        let prompt = tiny_prompt(2, 2, 2, 8);
        let x = assemble_cot_input(&prompt, 1).unwrap();
        let layout = prompt.layout(1).unwrap();
        assert_eq!(layout.total_cols(), 7);
        for c in 0..7 {
            assert_eq!(x.get(layout.enum_row(), c), (c + 1) as f64);
            assert!((x.get(layout.ln_row(), c) - ((c + 1) as f64).ln()).abs() < 1e-15);
        }
        let ind: Vec<f64> = (0..7).map(|c| x.get(layout.indicator_row(), c)).collect();
        assert_eq!(ind, [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_prompt_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let task = MlpTask::random(&[2, 2], LeakyAlpha::new(0.5).unwrap(), &mut rng).unwrap();
        assert!(CotPrompt::generate(&task, 0, 64, &mut rng).is_err());
    }

    #[test]
    fn assembly_round_trips_tokens() {
        let prompt = tiny_prompt(3, 2, 3, 9);
        let x = assemble_cot_input(&prompt, 1).unwrap();
        let layout = prompt.layout(1).unwrap();
        for (i, chain) in prompt.chains().iter().enumerate() {
            for (s, token) in chain.iter().enumerate() {
                let col = layout.demo_token_col(i, s + 1);
                for (r, &v) in token.iter().enumerate() {
                    assert_eq!(x.get(r, col), v);
                }
            }
        }
    }

    #[test]
    fn encodings_are_oblivious_to_step() {
        // Columns shared between step ell and ell+1 must carry identical
        // encodings; only the appended token column differs.
        let mut prompt = tiny_prompt(2, 2, 2, 10);
        let x1 = assemble_cot_input(&prompt, 1).unwrap();
        let pred = vec![0.25, -0.5];
        prompt.push_prediction(pred).unwrap();
        let x2 = assemble_cot_input(&prompt, 2).unwrap();
        let layout = prompt.layout(2).unwrap();
        for col in 0..x1.cols() {
            for row in layout.cycle_a_row()..layout.total_rows() {
                assert_eq!(x1.get(row, col), x2.get(row, col), "row {row} col {col}");
            }
        }
    }

    #[test]
    fn ideal_filter_of_zero_chains_is_zero() {
        let chains = vec![vec![vec![0.0; 2]; 2]; 2];
        let prompt = CotPrompt::from_parts(chains, vec![0.0; 2], vec![], 1, 2, 64).unwrap();
        let ideal = ideal_filtered(&prompt, 1).unwrap();
        assert_eq!(ideal.max_abs(), 0.0);
    }

    #[test]
    fn ideal_filter_minimal_case() {
        let prompt = tiny_prompt(2, 1, 2, 11);
        let ideal = ideal_filtered(&prompt, 1).unwrap();
        let layout = prompt.layout(1).unwrap();
        // band 1 holds x_i at cycle-1 columns and x_test at the end
        for (i, chain) in prompt.chains().iter().enumerate() {
            let col = layout.demo_token_col(i, 1);
            for (r, &v) in chain[0].iter().enumerate() {
                assert_eq!(ideal.get(r, col), v);
            }
            let col2 = layout.demo_token_col(i, 2);
            for (r, &v) in chain[1].iter().enumerate() {
                assert_eq!(ideal.get(layout.band2_start() + r, col2), v);
            }
        }
        let test_col = layout.test_token_col(1);
        for (r, &v) in prompt.test_input().iter().enumerate() {
            assert_eq!(ideal.get(r, test_col), v);
        }
        // test-segment band 2 stays zero
        for r in 0..layout.d_data {
            assert_eq!(ideal.get(layout.band2_start() + r, test_col), 0.0);
        }
    }
}
