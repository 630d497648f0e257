//! Binary tensor and parameter files, atomic writes and PGM previews.
//!
//! Tensor file (little-endian):
//! - magic `CDT1`
//! - version: u16 (= 1)
//! - rank: u16
//! - dims: rank * u32
//! - payload: f32 * product(dims), row-major
//!
//! Parameter file (little-endian):
//! - magic `CDP1`
//! - version: u16 (= 1)
//! - count: u32
//! - per entry: name length u16, UTF-8 name, rank u16, dims rank * u32,
//!   payload f64 * product(dims)

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::mixfield::{ChannelPolyParams, MixField, MixOptions, ModNetParams, Variant};
use crate::nn::{Activation, ConvNet};
use crate::predictors::{Mixer, ToyNet};
use crate::schedules::NoiseSchedule;

pub const TENSOR_MAGIC: &[u8; 4] = b"CDT1";
pub const PARAM_MAGIC: &[u8; 4] = b"CDP1";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::dims(&[n], &[data.len()]));
        }
        Ok(Self { dims, data })
    }

    pub fn from_field(field: &Field) -> Self {
        Self {
            dims: field.shape().to_vec(),
            data: field.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_plane(plane: ArrayView2<f64>) -> Self {
        Self {
            dims: plane.shape().to_vec(),
            data: plane.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_field(&self) -> Result<Field> {
        match self.dims[..] {
            [c, h, w] => Ok(Field::from_shape_vec((c, h, w), self.data.iter().map(|&v| v as f64).collect())
                .expect("length checked on construction")),
            _ => Err(Error::dims(&[3], &[self.dims.len()])),
        }
    }

    pub fn to_plane(&self) -> Result<Array2<f64>> {
        match self.dims[..] {
            [h, w] => Ok(Array2::from_shape_vec((h, w), self.data.iter().map(|&v| v as f64).collect())
                .expect("length checked on construction")),
            _ => Err(Error::dims(&[2], &[self.dims.len()])),
        }
    }
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(format_error(self.path, format!("truncated at byte {}", self.pos))),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(format_error(self.path, "bad magic"));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(format_error(self.path, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn dims(&mut self) -> Result<(Vec<usize>, usize)> {
        let rank = self.u16()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_error(self.path, "dimension product overflows"))?;
        Ok((dims, count))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_error(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn push_dims(out: &mut Vec<u8>, dims: &[usize]) -> Result<()> {
    let rank = u16::try_from(dims.len()).map_err(|_| Error::param("rank", "too many dimensions"))?;
    out.extend_from_slice(&rank.to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::param("dims", format!("{d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

pub fn encode_tensor(tensor: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * tensor.dims.len() + 4 * tensor.data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    push_dims(&mut out, &tensor.dims)?;
    for v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// `path` is only used in error messages.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0, path };
    cur.header(TENSOR_MAGIC)?;
    let (dims, count) = cur.dims()?;
    let payload = cur.take(count.checked_mul(4).ok_or_else(|| format_error(path, "payload too large"))?)?;
    cur.finish()?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect();
    Ok(Tensor { dims, data })
}

/// Write to a sibling temporary file and rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::param("path", format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = dir.join(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(tensor)?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?, path)
}

pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    write_tensor(path, &Tensor::from_field(field))
}

pub fn read_field(path: &Path) -> Result<Field> {
    read_tensor(path)?.to_field()
}

/// Named `f64` arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamFile {
    pub entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl ParamFile {
    pub fn push(&mut self, name: &str, dims: &[usize], data: Vec<f64>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.entries.push((name.to_string(), dims.to_vec(), data));
    }

    pub fn push_scalar(&mut self, name: &str, value: f64) {
        self.push(name, &[1], vec![value]);
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, d, v)| (d.as_slice(), v.as_slice()))
    }

    fn require(&self, name: &str, path: &Path) -> Result<(&[usize], &[f64])> {
        self.get(name).ok_or_else(|| format_error(path, format!("missing entry `{name}`")))
    }

    fn scalar(&self, name: &str, path: &Path) -> Result<f64> {
        match self.require(name, path)?.1 {
            [v] => Ok(*v),
            _ => Err(format_error(path, format!("entry `{name}` is not a scalar"))),
        }
    }

    fn index(&self, name: &str, path: &Path) -> Result<usize> {
        let v = self.scalar(name, path)?;
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(format_error(path, format!("entry `{name}` = {v} is not an index")));
        }
        Ok(v as usize)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::param("params", "too many entries"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, dims, data) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::param("params", "name too long"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            push_dims(&mut out, dims)?;
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        cur.header(PARAM_MAGIC)?;
        let count = cur.u32()? as usize;
        let mut file = ParamFile::default();
        for _ in 0..count {
            let len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| format_error(path, "entry name is not UTF-8"))?
                .to_string();
            let (dims, n) = cur.dims()?;
            let payload = cur.take(n.checked_mul(8).ok_or_else(|| format_error(path, "payload too large"))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            file.entries.push((name, dims, data));
        }
        cur.finish()?;
        Ok(file)
    }
}

fn push_net(file: &mut ParamFile, prefix: &str, net: &ConvNet) {
    file.push(
        &format!("{prefix}.channels"),
        &[net.channels().len()],
        net.channels().iter().map(|&c| c as f64).collect(),
    );
    file.push_scalar(&format!("{prefix}.hidden"), net.hidden_activation().code() as f64);
    file.push_scalar(
        &format!("{prefix}.output"),
        net.output_activation().map_or(0.0, |a| a.code() as f64),
    );
    file.push(&format!("{prefix}.params"), &[net.params().len()], net.params().to_vec());
}

fn read_net(file: &ParamFile, prefix: &str, path: &Path) -> Result<ConvNet> {
    let channels: Vec<usize> = file
        .require(&format!("{prefix}.channels"), path)?
        .1
        .iter()
        .map(|&c| c as usize)
        .collect();
    let activation = |name: &str| -> Result<Option<Activation>> {
        let code = file.index(&format!("{prefix}.{name}"), path)?;
        if code == 0 {
            return Ok(None);
        }
        Activation::from_code(code as u16)
            .map(Some)
            .ok_or_else(|| format_error(path, format!("unknown activation code {code}")))
    };
    let hidden = activation("hidden")?.ok_or_else(|| format_error(path, "missing hidden activation"))?;
    let output = activation("output")?;
    let params = file.require(&format!("{prefix}.params"), path)?.1.to_vec();
    if channels.len() < 2 {
        return Err(format_error(path, format!("{prefix}: need at least two channel entries")));
    }
    ConvNet::from_parts(channels, hidden, output, params)
        .ok_or_else(|| format_error(path, format!("{prefix}: parameter count does not match layout")))
}

fn push_opts(file: &mut ParamFile, horizon: usize, eps: f64) {
    file.push_scalar("mixer.horizon", horizon as f64);
    file.push_scalar("mixer.eps", eps);
}

/// Serialize a trained predictor and its mixing schedule. A fixed mixer must
/// be the linear variant; it is stored by its options and rebuilt on load.
pub fn encode_model(net: &ToyNet, mixer: &Mixer, schedule: &NoiseSchedule) -> Result<ParamFile> {
    let mut file = ParamFile::default();
    file.push_scalar("toy.sigma_data", net.sigma_data());
    push_net(&mut file, "toy", net.net());
    match mixer {
        Mixer::Fixed(field) => {
            if field.variant() != Variant::Linear {
                return Err(Error::param("mixer", "only the linear fixed field can be stored"));
            }
            file.push_scalar("mixer.variant", 0.0);
            push_opts(&mut file, field.horizon(), field.eps());
        }
        Mixer::ChannelPoly { params, opts } => {
            file.push_scalar("mixer.variant", 1.0);
            push_opts(&mut file, opts.horizon.unwrap_or(schedule.steps()), opts.eps);
            let c = params.coeffs();
            file.push("mixer.coeffs", c.shape(), c.iter().copied().collect());
        }
        Mixer::Dynamic { params, opts } => {
            file.push_scalar("mixer.variant", 2.0);
            push_opts(&mut file, opts.horizon.unwrap_or(schedule.steps()), opts.eps);
            push_net(&mut file, "mixer.net", params.net());
        }
    }
    Ok(file)
}

pub fn decode_model(file: &ParamFile, schedule: &NoiseSchedule, shape: [usize; 3], path: &Path) -> Result<(ToyNet, Mixer)> {
    let net = ToyNet::from_net(read_net(file, "toy", path)?, file.scalar("toy.sigma_data", path)?)?;
    if net.channels() != shape[0] {
        return Err(Error::dims(&[shape[0]], &[net.channels()]));
    }
    let opts = MixOptions {
        horizon: Some(file.index("mixer.horizon", path)?),
        eps: file.scalar("mixer.eps", path)?,
        raw_linear: false,
    };
    let mixer = match file.index("mixer.variant", path)? {
        0 => Mixer::Fixed(MixField::linear(schedule, shape, opts)?),
        1 => {
            let (dims, data) = file.require("mixer.coeffs", path)?;
            let coeffs = match dims {
                [c, d] => Array2::from_shape_vec((*c, *d), data.to_vec())
                    .map_err(|_| format_error(path, "coefficient payload does not match dims"))?,
                _ => return Err(format_error(path, "mixer.coeffs must be rank 2")),
            };
            Mixer::ChannelPoly {
                params: ChannelPolyParams::from_coeffs(coeffs)?,
                opts,
            }
        }
        2 => Mixer::Dynamic {
            params: ModNetParams::from_net(read_net(file, "mixer.net", path)?)?,
            opts,
        },
        v => return Err(format_error(path, format!("unknown mixer variant {v}"))),
    };
    Ok((net, mixer))
}

pub fn write_model(path: &Path, net: &ToyNet, mixer: &Mixer, schedule: &NoiseSchedule) -> Result<()> {
    write_atomic(path, &encode_model(net, mixer, schedule)?.encode()?)
}

pub fn read_model(path: &Path, schedule: &NoiseSchedule, shape: [usize; 3]) -> Result<(ToyNet, Mixer)> {
    let file = ParamFile::decode(&fs::read(path)?, path)?;
    decode_model(&file, schedule, shape, path)
}

/// 8-bit binary PGM of `(x + 1) / 2`, clipped to `[0, 1]`.
pub fn encode_pgm(plane: ArrayView2<f64>) -> Vec<u8> {
    let (h, w) = plane.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// One PGM per channel: `<stem>_c<k>.pgm` under `dir`.
pub fn write_previews(dir: &Path, stem: &str, field: &Field) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(field.shape()[0]);
    for (c, plane) in field.outer_iter().enumerate() {
        let path = dir.join(format!("{stem}_c{c}.pgm"));
        write_atomic(&path, &encode_pgm(plane))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_header_layout() {
        let t = Tensor::new(vec![1, 2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        assert_eq!(&bytes[..4], b"CDT1");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[3, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[3, 0, 0, 0]);
        assert_eq!(bytes.len(), 20 + 24);
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        assert_eq!(decode_tensor(&bytes, Path::new("x")).unwrap(), t);
    }

    #[test]
    fn tensor_rejects_corruption() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let good = encode_tensor(&t).unwrap();
        let p = Path::new("x");
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad, p), Err(Error::Format { .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_tensor(&bad, p), Err(Error::Format { .. })));
        assert!(decode_tensor(&good[..good.len() - 1], p).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(decode_tensor(&long, p).is_err());
        assert!(Tensor::new(vec![3], vec![0.0]).is_err());
    }

    #[test]
    fn model_round_trip() {
        let sched = NoiseSchedule::linear(50, 1e-3, 0.1).unwrap();
        let shape = [2, 5, 5];
        let net = ToyNet::init(3, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mixers = vec![
            Mixer::Fixed(MixField::linear(&sched, shape, MixOptions::truncated(30)).unwrap()),
            Mixer::ChannelPoly {
                params: ChannelPolyParams::identity(2, 3).unwrap(),
                opts: MixOptions::truncated(30),
            },
            Mixer::Dynamic {
                params: ModNetParams::random(2, 0.5, &mut rng),
                opts: MixOptions::default(),
            },
        ];
        for mixer in mixers {
            let file = encode_model(&net, &mixer, &sched).unwrap();
            let bytes = file.encode().unwrap();
            let back = ParamFile::decode(&bytes, Path::new("m")).unwrap();
            assert_eq!(back, file);
            let (net2, mixer2) = decode_model(&back, &sched, shape, Path::new("m")).unwrap();
            assert_eq!(net2, net);
            assert_eq!(
                mixer2.build(&sched, shape).unwrap(),
                mixer.build(&sched, shape).unwrap()
            );
        }
    }

    #[test]
    fn pgm_maps_range() {
        let plane = Array2::from_shape_vec((1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let bytes = encode_pgm(plane.view());
        let header = b"P5\n3 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255]);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
