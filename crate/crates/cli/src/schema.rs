//! Versioned JSON serialization with bit-exact doubles.
//!
//! Every file carries `"schema": "weightsmith/v1"`. Doubles are written as
//! decimal strings with 17 significant digits, which round-trips any finite
//! `f64` exactly.

use serde::{Deserialize, Serialize};
use std::fmt;
use weightsmith::cot::{CotPrompt, MlpTask};
use weightsmith::functions::FunctionTable;
use weightsmith::numerics::LeakyAlpha;
use weightsmith::numerics::{Matrix, Temperature};
use weightsmith::transformer::{AttentionHead, ConsequentialMask, FunctionBlock, TransformerLayer};

pub const SCHEMA_VERSION: &str = "weightsmith/v1";
/// Weight matrices of constructed blocks may exceed the default data bound.
const WEIGHT_BOUND: f64 = 1e18;

/// Version or kind mismatch while loading a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaError {
    pub expected: String,
    pub found: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "schema mismatch: expected `{}`, found `{}`",
            self.expected, self.found
        )
    }
}

impl std::error::Error for SchemaError {}

pub fn encode_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn decode_f64(s: &str) -> anyhow::Result<f64> {
    Ok(s.parse::<f64>()?)
}

fn check_schema(found: &str) -> Result<(), SchemaError> {
    if found == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(SchemaError {
            expected: SCHEMA_VERSION.to_string(),
            found: found.to_string(),
        })
    }
}

fn check_kind(expected: &str, found: &str) -> Result<(), SchemaError> {
    if found == expected {
        Ok(())
    } else {
        Err(SchemaError {
            expected: format!("kind `{expected}`"),
            found: format!("kind `{found}`"),
        })
    }
}

#[derive(Serialize, Deserialize, Clone)]
pub struct MatrixDto {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<String>,
}

impl MatrixDto {
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            entries: m.data().iter().map(|&v| encode_f64(v)).collect(),
        }
    }

    pub fn to_matrix(&self) -> anyhow::Result<Matrix> {
        let data = self
            .entries
            .iter()
            .map(|s| decode_f64(s))
            .collect::<anyhow::Result<Vec<f64>>>()?;
        Ok(Matrix::with_bound(
            self.rows,
            self.cols,
            data,
            WEIGHT_BOUND,
        )?)
    }
}

#[derive(Serialize, Deserialize)]
pub struct MatrixFile {
    pub schema: String,
    pub kind: String,
    #[serde(flatten)]
    pub matrix: MatrixDto,
}

pub fn matrix_to_json(m: &Matrix) -> String {
    serde_json::to_string_pretty(&MatrixFile {
        schema: SCHEMA_VERSION.to_string(),
        kind: "matrix".to_string(),
        matrix: MatrixDto::from_matrix(m),
    })
    .expect("matrix serialization cannot fail")
}

pub fn matrix_from_json(text: &str) -> anyhow::Result<Matrix> {
    let file: MatrixFile = serde_json::from_str(text)?;
    check_schema(&file.schema)?;
    check_kind("matrix", &file.kind)?;
    file.matrix.to_matrix()
}

#[derive(Serialize, Deserialize)]
struct HeadDto {
    w_k: MatrixDto,
    w_q: MatrixDto,
    w_v: MatrixDto,
}

#[derive(Serialize, Deserialize)]
struct LayerDto {
    lambda: String,
    heads: Vec<HeadDto>,
    w1: MatrixDto,
    b1: MatrixDto,
    w2: MatrixDto,
    b2: MatrixDto,
}

#[derive(Serialize, Deserialize)]
struct MaskDto {
    rows: usize,
    cols: usize,
    /// Row-major '0'/'1' characters.
    bits: String,
}

#[derive(Serialize, Deserialize)]
pub struct BlockFile {
    schema: String,
    kind: String,
    name: String,
    budget: String,
    input_rows: usize,
    input_cols: usize,
    mask: MaskDto,
    layers: Vec<LayerDto>,
}

pub fn block_to_json(block: &FunctionBlock) -> String {
    let mask_bits: String = (0..block.mask.rows())
        .flat_map(|r| {
            (0..block.mask.cols()).map(move |c| if block.mask.is_marked(r, c) { '1' } else { '0' })
        })
        .collect();
    let layers = block
        .layers
        .iter()
        .map(|layer| LayerDto {
            lambda: encode_f64(layer.lambda.lambda()),
            heads: layer
                .heads
                .iter()
                .map(|h| HeadDto {
                    w_k: MatrixDto::from_matrix(&h.w_k),
                    w_q: MatrixDto::from_matrix(&h.w_q),
                    w_v: MatrixDto::from_matrix(&h.w_v),
                })
                .collect(),
            w1: MatrixDto::from_matrix(&layer.w1),
            b1: MatrixDto::from_matrix(&layer.b1),
            w2: MatrixDto::from_matrix(&layer.w2),
            b2: MatrixDto::from_matrix(&layer.b2),
        })
        .collect();
    serde_json::to_string_pretty(&BlockFile {
        schema: SCHEMA_VERSION.to_string(),
        kind: "block".to_string(),
        name: block.name.clone(),
        budget: encode_f64(block.budget),
        input_rows: block.input_rows,
        input_cols: block.input_cols,
        mask: MaskDto {
            rows: block.mask.rows(),
            cols: block.mask.cols(),
            bits: mask_bits,
        },
        layers,
    })
    .expect("block serialization cannot fail")
}

pub fn block_from_json(text: &str) -> anyhow::Result<FunctionBlock> {
    let file: BlockFile = serde_json::from_str(text)?;
    check_schema(&file.schema)?;
    check_kind("block", &file.kind)?;
    if file.mask.bits.len() != file.mask.rows * file.mask.cols {
        anyhow::bail!("mask bit string does not match its shape");
    }
    let flags: Vec<bool> = file.mask.bits.chars().map(|c| c == '1').collect();
    let mask = ConsequentialMask::new(file.mask.rows, file.mask.cols, flags)?;
    let mut layers = Vec::new();
    for l in &file.layers {
        let heads = l
            .heads
            .iter()
            .map(|h| {
                AttentionHead::new(h.w_k.to_matrix()?, h.w_q.to_matrix()?, h.w_v.to_matrix()?)
                    .map_err(anyhow::Error::from)
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        layers.push(TransformerLayer::new(
            heads,
            l.w1.to_matrix()?,
            l.b1.to_matrix()?,
            l.w2.to_matrix()?,
            l.b2.to_matrix()?,
            Temperature::new(decode_f64(&l.lambda)?)?,
        )?);
    }
    Ok(FunctionBlock::new(
        file.name,
        layers,
        mask,
        decode_f64(&file.budget)?,
        file.input_rows,
        file.input_cols,
    )?)
}

#[derive(Serialize, Deserialize)]
pub struct PromptFile {
    schema: String,
    kind: String,
    depth: usize,
    d_data: usize,
    n_max: usize,
    chains: Vec<Vec<Vec<String>>>,
    test_input: Vec<String>,
    predictions: Vec<Vec<String>>,
}

pub fn prompt_to_json(prompt: &CotPrompt) -> String {
    let enc_vec = |v: &[f64]| v.iter().map(|&x| encode_f64(x)).collect::<Vec<_>>();
    serde_json::to_string_pretty(&PromptFile {
        schema: SCHEMA_VERSION.to_string(),
        kind: "prompt".to_string(),
        depth: prompt.depth(),
        d_data: prompt.d_data(),
        n_max: prompt.n_max(),
        chains: prompt
            .chains()
            .iter()
            .map(|chain| chain.iter().map(|t| enc_vec(t)).collect())
            .collect(),
        test_input: enc_vec(prompt.test_input()),
        predictions: prompt.predictions().iter().map(|p| enc_vec(p)).collect(),
    })
    .expect("prompt serialization cannot fail")
}

pub fn prompt_from_json(text: &str) -> anyhow::Result<CotPrompt> {
    let file: PromptFile = serde_json::from_str(text)?;
    check_schema(&file.schema)?;
    check_kind("prompt", &file.kind)?;
    let dec_vec =
        |v: &[String]| -> anyhow::Result<Vec<f64>> { v.iter().map(|s| decode_f64(s)).collect() };
    let chains = file
        .chains
        .iter()
        .map(|chain| chain.iter().map(|t| dec_vec(t)).collect())
        .collect::<anyhow::Result<Vec<Vec<Vec<f64>>>>>()?;
    let predictions = file
        .predictions
        .iter()
        .map(|p| dec_vec(p))
        .collect::<anyhow::Result<Vec<Vec<f64>>>>()?;
    Ok(CotPrompt::from_parts(
        chains,
        dec_vec(&file.test_input)?,
        predictions,
        file.depth,
        file.d_data,
        file.n_max,
    )?)
}

#[derive(Serialize, Deserialize)]
pub struct TaskFile {
    schema: String,
    kind: String,
    alpha: String,
    weights: Vec<MatrixDto>,
}

pub fn task_to_json(task: &MlpTask) -> String {
    serde_json::to_string_pretty(&TaskFile {
        schema: SCHEMA_VERSION.to_string(),
        kind: "task".to_string(),
        alpha: encode_f64(task.alpha().alpha()),
        weights: (0..task.depth())
            .map(|l| MatrixDto::from_matrix(task.weight(l)))
            .collect(),
    })
    .expect("task serialization cannot fail")
}

pub fn task_from_json(text: &str) -> anyhow::Result<MlpTask> {
    let file: TaskFile = serde_json::from_str(text)?;
    check_schema(&file.schema)?;
    check_kind("task", &file.kind)?;
    let weights = file
        .weights
        .iter()
        .map(|w| w.to_matrix())
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(MlpTask::new(
        weights,
        LeakyAlpha::new(decode_f64(&file.alpha)?)?,
    )?)
}

#[derive(Serialize, Deserialize)]
pub struct TableFile {
    schema: String,
    kind: String,
    dim: usize,
    barron_c: String,
    box_radius: String,
    coefficients: MatrixDto,
    directions: Vec<MatrixDto>,
}

pub fn table_to_json(table: &FunctionTable) -> String {
    let n = table.n_funcs();
    let m = table.terms();
    let d = table.dim();
    let mut coefs = Matrix::zeros(n, m);
    let mut dirs = Vec::new();
    for i in 0..m {
        let mut g = Matrix::zeros(d + 1, n);
        for j in 0..n {
            coefs.set(j, i, table.coefficient(j, i));
            for (r, &v) in table.folded_direction(j, i).iter().enumerate() {
                g.set(r, j, v);
            }
        }
        dirs.push(MatrixDto::from_matrix(&g));
    }
    serde_json::to_string_pretty(&TableFile {
        schema: SCHEMA_VERSION.to_string(),
        kind: "table".to_string(),
        dim: d,
        barron_c: encode_f64(table.barron_c()),
        box_radius: encode_f64(table.box_radius()),
        coefficients: MatrixDto::from_matrix(&coefs),
        directions: dirs,
    })
    .expect("table serialization cannot fail")
}

pub fn table_from_json(text: &str) -> anyhow::Result<FunctionTable> {
    let file: TableFile = serde_json::from_str(text)?;
    check_schema(&file.schema)?;
    check_kind("table", &file.kind)?;
    let coefficients = file.coefficients.to_matrix()?;
    let directions = file
        .directions
        .iter()
        .map(|d| d.to_matrix())
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(FunctionTable::new(
        coefficients,
        directions,
        file.dim,
        decode_f64(&file.barron_c)?,
        decode_f64(&file.box_radius)?,
    )?)
}
