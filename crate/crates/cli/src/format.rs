//! On-disk formats.
//!
//! Array files (`*.bin`) start with a 64-byte little-endian header
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `DYHARR01`                        |
//! | 8      | 4    | rank (1..=6), u32                       |
//! | 12     | 4    | dtype: 1 = float64, 2 = complex128, u32 |
//! | 16     | 48   | six u64 dims, unused ones zero          |
//!
//! followed by the values in row-major order, complex values as (re, im).
//! Every array has a JSON sidecar `<name>.json`.
//!
//! Trajectory containers (`trajectories.bin`) start with a 64-byte header
//!
//! | offset | size | field                                      |
//! |--------|------|--------------------------------------------|
//! | 0      | 8    | magic `DYHTRJ01`                           |
//! | 8      | 4    | dtype: 3 = complex64, u32                  |
//! | 12     | 4    | pathway count, u32                         |
//! | 16     | 4    | waiting-time count, u32                    |
//! | 20     | 4    | tau points, u32                            |
//! | 24     | 4    | t points, u32                              |
//! | 28     | 36   | zero                                       |
//!
//! and are followed by records of a u64 trajectory index, a u64 status
//! (1 ok, 0 failed) and `pathways * waiting * tau * t` complex64 values,
//! grids ordered pathway-major then by waiting time.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dyadhops::response::TrajectoryRecord;
use dyadhops::C64;
use ndarray::{Array2, ArrayD, IxDyn};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;

pub const ARRAY_MAGIC: &[u8; 8] = b"DYHARR01";
pub const TRAJECTORY_MAGIC: &[u8; 8] = b"DYHTRJ01";
pub const HEADER_LEN: usize = 64;
const MAX_RANK: usize = 6;
/// Arrays up to this many elements also get a CSV copy.
pub const CSV_LIMIT: usize = 200_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F64 = 1,
    C128 = 2,
    C64 = 3,
}

impl DType {
    fn from_code(c: u32) -> Option<Self> {
        match c {
            1 => Some(Self::F64),
            2 => Some(Self::C128),
            3 => Some(Self::C64),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::F64 => "float64",
            Self::C128 => "complex128",
            Self::C64 => "complex64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    Real(ArrayD<f64>),
    Complex(ArrayD<C64>),
}

impl ArrayData {
    pub fn shape(&self) -> &[usize] {
        match self {
            Self::Real(a) => a.shape(),
            Self::Complex(a) => a.shape(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            Self::Real(_) => DType::F64,
            Self::Complex(_) => DType::C128,
        }
    }

    pub fn real(self) -> Result<ArrayD<f64>> {
        match self {
            Self::Real(a) => Ok(a),
            Self::Complex(_) => bail!("expected a float64 array"),
        }
    }

    pub fn complex(self) -> Result<ArrayD<C64>> {
        match self {
            Self::Complex(a) => Ok(a),
            Self::Real(_) => bail!("expected a complex128 array"),
        }
    }
}

fn array_header(shape: &[usize], dtype: DType) -> io::Result<[u8; HEADER_LEN]> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "array rank must be 1..=6"));
    }
    let mut h = [0u8; HEADER_LEN];
    h[..8].copy_from_slice(ARRAY_MAGIC);
    h[8..12].copy_from_slice(&(shape.len() as u32).to_le_bytes());
    h[12..16].copy_from_slice(&(dtype as u32).to_le_bytes());
    for (i, &d) in shape.iter().enumerate() {
        h[16 + 8 * i..24 + 8 * i].copy_from_slice(&(d as u64).to_le_bytes());
    }
    Ok(h)
}

pub fn write_array<W: Write>(mut w: W, data: &ArrayData) -> io::Result<()> {
    w.write_all(&array_header(data.shape(), data.dtype())?)?;
    match data {
        ArrayData::Real(a) => {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        ArrayData::Complex(a) => {
            for v in a.iter() {
                w.write_all(&v.re.to_le_bytes())?;
                w.write_all(&v.im.to_le_bytes())?;
            }
        }
    }
    w.flush()
}

pub fn read_array<R: Read>(mut r: R) -> Result<ArrayData> {
    let mut h = [0u8; HEADER_LEN];
    r.read_exact(&mut h).context("array header")?;
    ensure!(&h[..8] == ARRAY_MAGIC, "not a DYHARR01 array");
    let rank = u32::from_le_bytes(h[8..12].try_into().unwrap()) as usize;
    ensure!((1..=MAX_RANK).contains(&rank), "bad rank {rank}");
    let code = u32::from_le_bytes(h[12..16].try_into().unwrap());
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(h[16 + 8 * i..24 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let mut f = |buf: &mut [u8; 8]| -> Result<f64> {
        r.read_exact(buf).context("array body truncated")?;
        Ok(f64::from_le_bytes(*buf))
    };
    let mut b = [0u8; 8];
    Ok(match DType::from_code(code) {
        Some(DType::F64) => {
            let v = (0..n).map(|_| f(&mut b)).collect::<Result<Vec<_>>>()?;
            ArrayData::Real(ArrayD::from_shape_vec(IxDyn(&shape), v)?)
        }
        Some(DType::C128) => {
            let v = (0..n).map(|_| Ok(C64::new(f(&mut b)?, f(&mut b)?))).collect::<Result<Vec<_>>>()?;
            ArrayData::Complex(ArrayD::from_shape_vec(IxDyn(&shape), v)?)
        }
        _ => bail!("unsupported array dtype {code}"),
    })
}

pub fn read_array_file(path: &Path) -> Result<ArrayData> {
    read_array(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
        .with_context(|| format!("reading {}", path.display()))
}

/// Writes run outputs with their sidecars. Nothing time- or host-dependent
/// goes into any file.
pub struct OutputDir {
    pub root: PathBuf,
    common: Value,
}

impl OutputDir {
    pub fn create(root: &Path, config: &RunConfig, command: &str, method: &str, deterministic: bool) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            common: json!({
                "version": env!("CARGO_PKG_VERSION"),
                "command": command,
                "method": method,
                "seed": config.sampling.seed,
                "deterministic": deterministic,
                "config": config,
            }),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn sidecar(&self, file: &str, format: &str, extra: Value) -> Value {
        let mut v = json!({ "file": file, "format": format });
        let obj = v.as_object_mut().unwrap();
        if let Value::Object(e) = extra {
            obj.extend(e);
        }
        if let Value::Object(c) = &self.common {
            obj.extend(c.clone());
        }
        v
    }

    fn write_sidecar(&self, file: &str, sidecar: &Value) -> Result<()> {
        let stem = file.rsplit_once('.').map_or(file, |(s, _)| s);
        let text = serde_json::to_string_pretty(sidecar)? + "\n";
        std::fs::write(self.path(&format!("{stem}.json")), text)?;
        Ok(())
    }

    /// Array file plus sidecar; small arrays are mirrored as CSV with the
    /// given axis columns.
    pub fn array(&self, name: &str, data: &ArrayData, axes: &[(&str, &[f64])], extra: Value) -> Result<()> {
        let file = format!("{name}.bin");
        let mut w = BufWriter::new(File::create(self.path(&file))?);
        write_array(&mut w, data)?;
        let axis_json: serde_json::Map<String, Value> =
            axes.iter().map(|(n, v)| (n.to_string(), json!(v))).collect();
        let mut extra = extra;
        if let Value::Object(e) = &mut extra {
            e.insert("dtype".into(), json!(data.dtype().name()));
            e.insert("shape".into(), json!(data.shape()));
            e.insert("axes".into(), Value::Object(axis_json));
        }
        let side = self.sidecar(&file, "DYHARR01", extra);
        self.write_sidecar(&file, &side)?;
        if data.shape().iter().product::<usize>() <= CSV_LIMIT && axes.len() == data.shape().len() {
            std::fs::write(self.path(&format!("{name}.csv")), array_csv(data, axes))?;
        }
        Ok(())
    }

    pub fn real2(&self, name: &str, a: &Array2<f64>, axes: [(&str, &[f64]); 2], extra: Value) -> Result<()> {
        self.array(name, &ArrayData::Real(a.clone().into_dyn()), &axes, extra)
    }

    pub fn complex2(&self, name: &str, a: &Array2<C64>, axes: [(&str, &[f64]); 2], extra: Value) -> Result<()> {
        self.array(name, &ArrayData::Complex(a.clone().into_dyn()), &axes, extra)
    }

    pub fn real1(&self, name: &str, v: &[f64], axis: (&str, &[f64]), extra: Value) -> Result<()> {
        self.array(name, &ArrayData::Real(ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec())?), &[axis], extra)
    }

    pub fn complex1(&self, name: &str, v: &[C64], axis: (&str, &[f64]), extra: Value) -> Result<()> {
        self.array(name, &ArrayData::Complex(ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec())?), &[axis], extra)
    }

    /// CSV file plus sidecar.
    pub fn csv(&self, name: &str, text: &str, extra: Value) -> Result<()> {
        let file = format!("{name}.csv");
        std::fs::write(self.path(&file), text)?;
        let side = self.sidecar(&file, "csv", extra);
        self.write_sidecar(&file, &side)
    }

    /// JSON report; the sidecar fields are embedded under `metadata`.
    pub fn report<T: Serialize>(&self, name: &str, body: &T) -> Result<()> {
        let file = format!("{name}.json");
        let v = json!({ "report": body, "metadata": self.sidecar(&file, "json", json!({})) });
        std::fs::write(self.path(&file), serde_json::to_string_pretty(&v)? + "\n")?;
        Ok(())
    }

    pub fn trajectory_writer(&self, shape: TrajectoryShape) -> Result<TrajectoryWriter<BufWriter<File>>> {
        let file = "trajectories.bin";
        let side = self.sidecar(
            file,
            "DYHTRJ01",
            json!({ "dtype": "complex64", "layout": shape }),
        );
        self.write_sidecar(file, &side)?;
        Ok(TrajectoryWriter::new(BufWriter::new(File::create(self.path(file))?), shape)?)
    }
}

fn array_csv(data: &ArrayData, axes: &[(&str, &[f64])]) -> String {
    let mut s = String::new();
    for (n, _) in axes {
        s.push_str(n);
        s.push(',');
    }
    match data {
        ArrayData::Real(_) => s.push_str("value\n"),
        ArrayData::Complex(_) => s.push_str("re,im\n"),
    }
    let shape = data.shape().to_vec();
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for k in 0..n {
        let mut rem = k;
        for d in (0..shape.len()).rev() {
            idx[d] = rem % shape[d];
            rem /= shape[d];
        }
        for (d, (_, ax)) in axes.iter().enumerate() {
            s.push_str(&format!("{},", ax.get(idx[d]).copied().unwrap_or(f64::NAN)));
        }
        match data {
            ArrayData::Real(a) => s.push_str(&format!("{}\n", a[IxDyn(&idx)])),
            ArrayData::Complex(a) => {
                let v = a[IxDyn(&idx)];
                s.push_str(&format!("{},{}\n", v.re, v.im));
            }
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct TrajectoryShape {
    pub n_pathways: usize,
    pub n_waiting: usize,
    pub n_tau: usize,
    pub n_t: usize,
}

impl TrajectoryShape {
    pub fn values(&self) -> usize {
        self.n_pathways * self.n_waiting * self.n_tau * self.n_t
    }

    fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[..8].copy_from_slice(TRAJECTORY_MAGIC);
        for (i, v) in [DType::C64 as u32, self.n_pathways as u32, self.n_waiting as u32, self.n_tau as u32, self.n_t as u32]
            .into_iter()
            .enumerate()
        {
            h[8 + 4 * i..12 + 4 * i].copy_from_slice(&v.to_le_bytes());
        }
        h
    }
}

pub struct TrajectoryWriter<W: Write> {
    w: W,
    shape: TrajectoryShape,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(mut w: W, shape: TrajectoryShape) -> io::Result<Self> {
        w.write_all(&shape.header())?;
        Ok(Self { w, shape })
    }

    pub fn append(&mut self, rec: &TrajectoryRecord) -> io::Result<()> {
        let n: usize = rec.grids.iter().map(|g| g.len()).sum();
        if n != self.shape.values() {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "record does not match container layout"));
        }
        self.w.write_all(&rec.index.to_le_bytes())?;
        self.w.write_all(&(rec.ok as u64).to_le_bytes())?;
        for g in &rec.grids {
            for v in g.iter() {
                self.w.write_all(&(v.re as f32).to_le_bytes())?;
                self.w.write_all(&(v.im as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.w.flush()?;
        Ok(self.w)
    }
}

pub struct TrajectoryReader<R: Read> {
    r: R,
    pub shape: TrajectoryShape,
}

impl<R: Read> TrajectoryReader<R> {
    pub fn new(mut r: R) -> Result<Self> {
        let mut h = [0u8; HEADER_LEN];
        r.read_exact(&mut h).context("trajectory header")?;
        ensure!(&h[..8] == TRAJECTORY_MAGIC, "not a DYHTRJ01 container");
        let u = |i: usize| u32::from_le_bytes(h[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        ensure!(u(0) == DType::C64 as usize, "unsupported trajectory dtype {}", u(0));
        Ok(Self {
            r,
            shape: TrajectoryShape {
                n_pathways: u(1),
                n_waiting: u(2),
                n_tau: u(3),
                n_t: u(4),
            },
        })
    }

    /// Next record, or `None` at a clean end of file.
    pub fn next_record(&mut self) -> Result<Option<TrajectoryRecord>> {
        let mut b8 = [0u8; 8];
        match self.r.read_exact(&mut b8) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let index = u64::from_le_bytes(b8);
        self.r.read_exact(&mut b8).context("record truncated")?;
        let ok = u64::from_le_bytes(b8) == 1;
        let s = self.shape;
        let mut body = vec![0u8; s.values() * 8];
        self.r.read_exact(&mut body).context("record truncated")?;
        let vals: Vec<C64> = body
            .chunks_exact(8)
            .map(|c| {
                C64::new(
                    f32::from_le_bytes(c[..4].try_into().unwrap()) as f64,
                    f32::from_le_bytes(c[4..].try_into().unwrap()) as f64,
                )
            })
            .collect();
        let block = s.n_tau * s.n_t;
        let grids = vals
            .chunks_exact(block)
            .map(|c| Array2::from_shape_vec((s.n_tau, s.n_t), c.to_vec()).unwrap())
            .collect();
        Ok(Some(TrajectoryRecord { index, ok, grids }))
    }
}

pub fn open_trajectories(path: &Path) -> Result<TrajectoryReader<BufReader<File>>> {
    TrajectoryReader::new(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}
