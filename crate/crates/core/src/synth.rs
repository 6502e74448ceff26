//! Synthetic paired "image"/"text" views of latent discrete attribute tuples.
//!
//! Each sample draws one value per attribute. The code vector concatenates a
//! one-hot block per attribute scaled by that attribute's salience, and each
//! view is a fixed isometric embedding of the code plus independent noise.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeSpec {
    pub num_attributes: usize,
    pub values_per_attribute: usize,
    pub salience: Vec<f64>,
    pub noise_sigma: f64,
    /// Width of each view after mixing.
    pub view_dim: usize,
}

impl Default for AttributeSpec {
    fn default() -> Self {
        AttributeSpec {
            num_attributes: 3,
            values_per_attribute: 4,
            salience: vec![4.0, 2.0, 1.0],
            noise_sigma: 0.1,
            view_dim: 24,
        }
    }
}

impl AttributeSpec {
    pub fn code_dim(&self) -> usize {
        self.num_attributes * self.values_per_attribute
    }

    pub fn num_classes(&self) -> usize {
        self.values_per_attribute.pow(self.num_attributes as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_attributes == 0 || self.values_per_attribute < 2 {
            return Err(Error::Config(
                "need at least one attribute with at least two values".into(),
            ));
        }
        if self.salience.len() != self.num_attributes {
            return Err(Error::Config(format!(
                "salience has {} entries for {} attributes",
                self.salience.len(),
                self.num_attributes
            )));
        }
        if self.salience.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("salience must be positive".into()));
        }
        if self.salience.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("salience must be strictly decreasing".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        if self.view_dim < self.code_dim() {
            return Err(Error::Config(format!(
                "view_dim {} is smaller than the code width {}",
                self.view_dim,
                self.code_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample_id: usize,
    pub attributes: Vec<usize>,
    pub image_vec: Vec<f64>,
    pub text_vec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SynthSample>,
    pub eval: Vec<SynthSample>,
    pub spec: AttributeSpec,
    pub seed: u64,
}

/// Row-aligned view matrices for a list of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedData {
    pub ids: Vec<usize>,
    pub image: Tensor,
    pub text: Tensor,
}

impl PairedData {
    pub fn from_samples(samples: &[SynthSample]) -> Self {
        let n = samples.len();
        let di = samples.first().map_or(0, |s| s.image_vec.len());
        let dt = samples.first().map_or(0, |s| s.text_vec.len());
        let image = samples.iter().flat_map(|s| s.image_vec.iter().copied()).collect();
        let text = samples.iter().flat_map(|s| s.text_vec.iter().copied()).collect();
        PairedData {
            ids: samples.iter().map(|s| s.sample_id).collect(),
            image: Tensor::from_rows(n, di, image, DType::F32),
            text: Tensor::from_rows(n, dt, text, DType::F32),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

const STREAM_ATTRS: u64 = 0;
const STREAM_IMG_NOISE: u64 = 1;
const STREAM_TXT_NOISE: u64 = 2;
const STREAM_MIX_IMG: u64 = u64::MAX;
const STREAM_MIX_TXT: u64 = u64::MAX - 1;

/// `rows×cols` matrix with orthonormal columns (Gram-Schmidt of a Gaussian draw).
fn isometry(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn mix(code: &[f64], columns: &[Vec<f64>], view_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; view_dim];
    for (&c, col) in code.iter().zip(columns) {
        if c != 0.0 {
            for (o, v) in out.iter_mut().zip(col) {
                *o += c * v;
            }
        }
    }
    out
}

fn make_sample(
    spec: &AttributeSpec,
    seed: u64,
    sample_id: usize,
    m_img: &[Vec<f64>],
    m_txt: &[Vec<f64>],
) -> SynthSample {
    let stream = |purpose: u64| ((sample_id as u64) << 2) | purpose;
    let mut arng = rng::seeded(seed, stream(STREAM_ATTRS));
    let attributes: Vec<usize> = (0..spec.num_attributes)
        .map(|_| arng.random_range(0..spec.values_per_attribute))
        .collect();
    let code = code_vector(spec, &attributes);
    let noisy = |m: &[Vec<f64>], purpose: u64| {
        let mut r = rng::seeded(seed, stream(purpose));
        mix(&code, m, spec.view_dim)
            .into_iter()
            .map(|v| {
                let e: f64 = StandardNormal.sample(&mut r);
                (v + spec.noise_sigma * e) as f32 as f64
            })
            .collect::<Vec<f64>>()
    };
    SynthSample {
        sample_id,
        image_vec: noisy(m_img, STREAM_IMG_NOISE),
        text_vec: noisy(m_txt, STREAM_TXT_NOISE),
        attributes,
    }
}

/// Concatenated salience-scaled one-hot blocks.
pub fn code_vector(spec: &AttributeSpec, attributes: &[usize]) -> Vec<f64> {
    let mut code = vec![0.0; spec.code_dim()];
    for (a, &v) in attributes.iter().enumerate() {
        code[a * spec.values_per_attribute + v] = spec.salience[a];
    }
    code
}

pub fn generate_dataset(
    n_train: usize,
    n_eval: usize,
    spec: &AttributeSpec,
    seed: u64,
) -> Result<DatasetSplit> {
    spec.validate()?;
    let m_img = isometry(&mut rng::seeded(seed, STREAM_MIX_IMG), spec.view_dim, spec.code_dim());
    let m_txt = isometry(&mut rng::seeded(seed, STREAM_MIX_TXT), spec.view_dim, spec.code_dim());
    let all: Vec<SynthSample> = (0..n_train + n_eval)
        .into_par_iter()
        .map(|id| make_sample(spec, seed, id, &m_img, &m_txt))
        .collect();
    let mut train = all;
    let eval = train.split_off(n_train);
    Ok(DatasetSplit {
        train,
        eval,
        spec: spec.clone(),
        seed,
    })
}

pub fn attribute_labels(samples: &[SynthSample], attribute_index: usize) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            s.attributes.get(attribute_index).copied().ok_or(Error::Index {
                index: attribute_index,
                len: s.attributes.len(),
            })
        })
        .collect()
}

/// Writes `sample_id,attr_*,img_*,txt_*` rows; floats use the shortest
/// decimal that round-trips through `f32`.
pub fn write_csv(samples: &[SynthSample], path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    let (na, di, dt) = samples.first().map_or((0, 0, 0), |s| {
        (s.attributes.len(), s.image_vec.len(), s.text_vec.len())
    });
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..na).map(|i| format!("attr_{i}")));
    header.extend((0..di).map(|i| format!("img_{i}")));
    header.extend((0..dt).map(|i| format!("txt_{i}")));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for s in samples {
        let mut fields = vec![s.sample_id.to_string()];
        fields.extend(s.attributes.iter().map(|a| a.to_string()));
        fields.extend(s.image_vec.iter().chain(&s.text_vec).map(|&v| (v as f32).to_string()));
        writeln!(w, "{}", fields.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_csv(path: &Path) -> Result<Vec<SynthSample>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(e.to_string()))?
        .clone();
    let count = |prefix: &str| headers.iter().filter(|h| h.starts_with(prefix)).count();
    let (na, di, dt) = (count("attr_"), count("img_"), count("txt_"));
    if headers.get(0) != Some("sample_id") || headers.len() != 1 + na + di + dt {
        return Err(Error::Data(format!("{}: unexpected header", path.display())));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parse_usize = |i: usize| {
            field(i)
                .parse::<usize>()
                .map_err(|e| Error::Data(format!("column {i}: {e}")))
        };
        let parse_f = |i: usize| {
            field(i)
                .parse::<f32>()
                .map(f64::from)
                .map_err(|e| Error::Data(format!("column {i}: {e}")))
        };
        out.push(SynthSample {
            sample_id: parse_usize(0)?,
            attributes: (1..1 + na).map(parse_usize).collect::<Result<_>>()?,
            image_vec: (1 + na..1 + na + di).map(parse_f).collect::<Result<_>>()?,
            text_vec: (1 + na + di..1 + na + di + dt).map(parse_f).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}
