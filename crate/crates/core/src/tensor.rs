//! Dense embedding matrices and their on-disk binary layout.
//!
//! Every binary artifact in the pipeline uses the same convention: one line
//! of JSON describing the payload, a `\n`, then the row-major little-endian
//! payload. A single matrix carries `{rows, cols, dtype, space}`; a sectioned
//! file (PCA models, checkpoints) carries `{dtype, sections: [...], meta}`
//! and stores the sections back to back in the listed order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    /// Text-encoder output, width d_llm.
    Raw,
    /// PCA-reduced, width d_m.
    Reduced,
    /// Recommendation space, width d.
    Recommendation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: Mat,
    pub space: Space,
    pub trainable: bool,
}

impl EmbeddingMatrix {
    pub fn new(values: Mat, space: Space) -> Self {
        Self {
            values,
            space,
            trainable: false,
        }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w, dtype)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W, dtype: Dtype) -> Result<()> {
        let header = MatrixHeader {
            rows: self.rows(),
            cols: self.cols(),
            dtype,
            space: self.space,
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        write_payload(w, &self.values, dtype)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let header: MatrixHeader = read_header(r)?;
        let values = read_payload(r, header.rows, header.cols, header.dtype)?;
        Ok(Self::new(values, header.space))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixHeader {
    rows: usize,
    cols: usize,
    dtype: Dtype,
    space: Space,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SectionsHeader {
    dtype: Dtype,
    sections: Vec<SectionSpec>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named matrices plus free-form metadata, as stored in a sectioned file.
#[derive(Clone, Debug, PartialEq)]
pub struct Sections {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

impl Sections {
    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("missing section `{name}`")))
    }

    pub fn write_to<W: Write>(&self, w: &mut W, dtype: Dtype) -> Result<()> {
        let header = SectionsHeader {
            dtype,
            sections: self
                .tensors
                .iter()
                .map(|(name, m)| SectionSpec {
                    name: name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for (_, m) in &self.tensors {
            write_payload(w, m, dtype)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, dtype)?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w, dtype)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let header: SectionsHeader = read_header(r)?;
        let mut tensors = Vec::with_capacity(header.sections.len());
        for spec in header.sections {
            let m = read_payload(r, spec.rows, spec.cols, header.dtype)?;
            tensors.push((spec.name, m));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

pub(crate) fn read_header<R: BufRead, T: serde::de::DeserializeOwned>(r: &mut R) -> Result<T> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(Error::Format("missing JSON header line".into()));
    }
    Ok(serde_json::from_str(line.trim_end())?)
}

fn write_payload<W: Write>(w: &mut W, m: &Mat, dtype: Dtype) -> Result<()> {
    for &x in m.iter() {
        match dtype {
            Dtype::F32 => w.write_all(&(x as f32).to_le_bytes())?,
            Dtype::F64 => w.write_all(&x.to_le_bytes())?,
        }
    }
    Ok(())
}

fn read_payload<R: Read>(r: &mut R, rows: usize, cols: usize, dtype: Dtype) -> Result<Mat> {
    let mut bytes = vec![0u8; rows * cols * dtype.width()];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated payload ({rows}x{cols}): {e}")))?;
    let data: Vec<f64> = match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))
}
