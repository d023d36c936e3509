//! File formats: VBV1 volumes, VBM1 checkpoints, binary PPM/PGM images,
//! dataset directories and JSONL loss logs.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Result, TbnError};
use crate::flow::RigidPose;
use crate::image::ImagePlane;
use crate::net::{Arch, Param, TbnModel};
use crate::scalar::Real;
use crate::scenes::{Dataset, DatasetConfig, MultiViewSample, ShapeFamily, View, VoxelShape};
use crate::train::LogEntry;
use crate::volume::{Dims, FeatureVolume};

pub const VOLUME_MAGIC: &[u8; 5] = b"VBV1\n";
pub const MODEL_MAGIC: &[u8; 5] = b"VBM1\n";

fn format_err(msg: impl Into<String>) -> TbnError {
    TbnError::Format(msg.into())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_f32s<T: Real>(r: &mut impl Read, n: usize) -> Result<Vec<T>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| T::lit(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
        .collect())
}

fn write_f32s<T: Real>(w: &mut impl Write, data: &[T]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_f32_lossy().to_le_bytes())?;
    }
    Ok(())
}

/// `VBV1\n`, u32 D H W C, then `f32` values in storage order.
pub fn write_volume<T: Real>(w: &mut impl Write, v: &FeatureVolume<T>) -> Result<()> {
    let d = v.dims();
    w.write_all(VOLUME_MAGIC)?;
    for x in [d.d, d.h, d.w, v.channels()] {
        w.write_all(&(x as u32).to_le_bytes())?;
    }
    write_f32s(w, v.data())
}

pub fn read_volume<T: Real>(r: &mut impl Read) -> Result<FeatureVolume<T>> {
    if &read_exact::<5>(r)? != VOLUME_MAGIC {
        return Err(format_err("not a VBV1 volume"));
    }
    let mut h = [0usize; 4];
    for x in &mut h {
        *x = read_u32(r)? as usize;
    }
    let dims = Dims::new(h[0], h[1], h[2]);
    let n = dims
        .cells()
        .checked_mul(h[3])
        .filter(|&n| n > 0 && n < 1 << 30)
        .ok_or_else(|| format_err(format!("implausible volume header {h:?}")))?;
    FeatureVolume::from_data(dims, h[3], read_f32s(r, n)?)
}

pub fn save_volume<T: Real>(path: &Path, v: &FeatureVolume<T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_volume(&mut w, v)?;
    w.flush()?;
    Ok(())
}

pub fn load_volume<T: Real>(path: &Path) -> Result<FeatureVolume<T>> {
    read_volume(&mut BufReader::new(fs::File::open(path)?))
}

#[derive(Serialize, Deserialize)]
struct ModelTrailer {
    arch: Arch,
}

/// `VBM1\n`, u32 tensor count, then per tensor u16 name length, name, u32
/// rank, u32 dims and `f32` data; a u32-length-prefixed JSON trailer holds
/// the architecture.
pub fn write_model<T: Real>(w: &mut impl Write, model: &TbnModel<T>) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for p in model.params() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.tensor.shape.len() as u32).to_le_bytes())?;
        for &d in &p.tensor.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        write_f32s(w, &p.tensor.data)?;
    }
    let trailer = serde_json::to_vec(&ModelTrailer { arch: model.arch() })?;
    w.write_all(&(trailer.len() as u32).to_le_bytes())?;
    w.write_all(&trailer)?;
    Ok(())
}

pub fn read_model<T: Real>(r: &mut impl Read) -> Result<TbnModel<T>> {
    if &read_exact::<5>(r)? != MODEL_MAGIC {
        return Err(format_err("not a VBM1 checkpoint"));
    }
    let count = read_u32(r)? as usize;
    if count > 4096 {
        return Err(format_err(format!("implausible tensor count {count}")));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| format_err("tensor name is not UTF-8"))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(format_err(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n >= 1 << 28 {
            return Err(format_err(format!("tensor {name} is too large")));
        }
        let data = read_f32s(r, n)?;
        params.push(Param {
            name,
            tensor: Tensor::new(shape, data),
        });
    }
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(format_err("implausible trailer length"));
    }
    let mut trailer = vec![0u8; len];
    r.read_exact(&mut trailer)?;
    let trailer: ModelTrailer = serde_json::from_slice(&trailer)?;
    TbnModel::from_params(trailer.arch, params)
}

pub fn save_model<T: Real>(path: &Path, model: &TbnModel<T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model<T: Real>(path: &Path) -> Result<TbnModel<T>> {
    read_model(&mut BufReader::new(fs::File::open(path)?))
}

/// Binary PPM (3 channels) or PGM (1 channel).
pub fn write_pnm<T: Real>(w: &mut impl Write, image: &ImagePlane<T>) -> Result<()> {
    let (magic, k) = match image.channels() {
        1 => ("P5", 1),
        3 | 4 => ("P6", 3),
        c => return Err(format_err(format!("cannot write a {c}-channel image as PNM"))),
    };
    write!(w, "{magic}\n{} {}\n255\n", image.width(), image.height())?;
    w.write_all(&image.to_bytes(k))?;
    Ok(())
}

fn pnm_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            break;
        }
        let c = b[0] as char;
        if c == '#' {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
    }
    Ok(tok)
}

pub fn read_pnm<T: Real>(r: &mut impl BufRead) -> Result<ImagePlane<T>> {
    let channels = match pnm_token(r)?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format_err(format!("unsupported PNM magic {m:?}"))),
    };
    let mut num = || -> Result<usize> {
        pnm_token(r)?
            .parse()
            .map_err(|_| format_err("bad PNM header number"))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(format_err(format!("only 8-bit PNM is supported, max value {max}")));
    }
    let mut bytes = vec![0u8; w * h * channels];
    r.read_exact(&mut bytes)?;
    ImagePlane::from_bytes(h, w, channels, &bytes)
}

pub fn save_pnm<T: Real>(path: &Path, image: &ImagePlane<T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_pnm(&mut w, image)?;
    w.flush()?;
    Ok(())
}

pub fn load_pnm<T: Real>(path: &Path) -> Result<ImagePlane<T>> {
    read_pnm(&mut BufReader::new(fs::File::open(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub id: usize,
    pub family: ShapeFamily,
    pub split: String,
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub scenes: Vec<ManifestScene>,
}

fn scene_dir(id: usize) -> String {
    format!("scenes/{id:05}")
}

/// Writes `manifest.json` and one directory per scene under `root`.
pub fn write_dataset<T: Real>(root: &Path, dataset: &Dataset<T>) -> Result<()> {
    let n_train = dataset.config.n_train();
    let mut manifest = Manifest {
        config: dataset.config.clone(),
        scenes: Vec::new(),
    };
    for s in &dataset.scenes {
        let rel = scene_dir(s.id);
        let dir = root.join(&rel);
        fs::create_dir_all(&dir)?;
        for (k, v) in s.views.iter().enumerate() {
            save_pnm(&dir.join(format!("view_{k}.ppm")), &v.image)?;
            save_pnm(&dir.join(format!("mask_{k}.pgm")), &v.mask)?;
        }
        let poses: Vec<RigidPose> = s.views.iter().map(|v| v.pose).collect();
        fs::write(dir.join("poses.json"), serde_json::to_string_pretty(&poses)?)?;
        save_volume(&dir.join("occupancy.vbv"), &s.shape.occupancy::<f32>())?;
        save_volume(&dir.join("colors.vbv"), &s.shape.color_volume::<f32>())?;
        manifest.scenes.push(ManifestScene {
            id: s.id,
            family: s.shape.family(),
            split: if s.id < n_train { "train" } else { "test" }.into(),
            dir: rel,
        });
    }
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_dataset<T: Real>(root: &Path) -> Result<Dataset<T>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(root.join("manifest.json"))?)?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for m in &manifest.scenes {
        let dir = root.join(&m.dir);
        let poses: Vec<RigidPose> = serde_json::from_slice(&fs::read(dir.join("poses.json"))?)?;
        let views = poses
            .into_iter()
            .enumerate()
            .map(|(k, pose)| {
                Ok(View {
                    pose,
                    image: load_pnm(&dir.join(format!("view_{k}.ppm")))?,
                    mask: load_pnm(&dir.join(format!("mask_{k}.pgm")))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let occ = load_volume::<f32>(&dir.join("occupancy.vbv"))?;
        let colors = load_volume::<f32>(&dir.join("colors.vbv"))?;
        scenes.push(MultiViewSample {
            id: m.id,
            shape: VoxelShape::from_volumes(m.family, &occ, &colors)?,
            views,
        });
    }
    Ok(Dataset {
        config: manifest.config,
        scenes,
    })
}

pub fn write_loss_log(w: &mut impl Write, log: &[LogEntry]) -> Result<()> {
    for e in log {
        writeln!(w, "{}", e.to_json_line())?;
    }
    Ok(())
}

pub fn read_loss_log(r: impl BufRead) -> Result<Vec<LogEntry>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// `dir/name`, creating `dir` first.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{make_dataset, PoseSampling};

    #[test]
    fn volume_round_trip() {
        let v = FeatureVolume::<f32>::from_fn(Dims::new(2, 3, 4), 2, |z, y, x, c| (z * 100 + y * 10 + x) as f32 - c as f32 * 0.5);
        let mut buf = Vec::new();
        write_volume(&mut buf, &v).unwrap();
        assert_eq!(&buf[..5], b"VBV1\n");
        assert_eq!(buf.len(), 5 + 16 + 4 * v.data().len());
        assert_eq!(read_volume::<f32>(&mut buf.as_slice()).unwrap(), v);
        buf[0] = b'X';
        assert!(read_volume::<f32>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn model_round_trip_is_exact_in_f32() {
        let m = TbnModel::<f32>::new(Arch::tiny(), 5).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        let back: TbnModel<f32> = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_model(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn truncated_model_is_rejected() {
        let m = TbnModel::<f32>::new(Arch::tiny(), 5).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_model::<f32>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn pnm_round_trip() {
        let im = ImagePlane::<f32>::from_fn(3, 5, 3, |c, y, x| ((c * 7 + y * 3 + x) % 6) as f32 / 5.0);
        let mut buf = Vec::new();
        write_pnm(&mut buf, &im).unwrap();
        assert!(buf.starts_with(b"P6\n5 3\n255\n"));
        let back: ImagePlane<f32> = read_pnm(&mut buf.as_slice()).unwrap();
        assert_eq!(back.to_bytes(3), im.to_bytes(3));
        let mask = ImagePlane::<f32>::from_fn(2, 2, 1, |_, y, x| ((x + y) % 2) as f32);
        let mut buf = Vec::new();
        write_pnm(&mut buf, &mask).unwrap();
        assert_eq!(read_pnm::<f32>(&mut buf.as_slice()).unwrap(), mask);
        let commented = b"P5\n# hi\n2 1\n255\n\x00\xff";
        let im: ImagePlane<f32> = read_pnm(&mut &commented[..]).unwrap();
        assert_eq!(im.data(), &[0.0, 1.0]);
    }

    #[test]
    fn dataset_directory_round_trip() {
        let cfg = DatasetConfig {
            n_scenes: 3,
            n_test: 1,
            n_views: 3,
            sampling: PoseSampling::Random,
            families: ShapeFamily::ALL.to_vec(),
            ..DatasetConfig::default()
        };
        let ds = make_dataset::<f32>(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        assert!(dir.path().join("scenes/00000/view_0.ppm").exists());
        assert!(dir.path().join("scenes/00002/occupancy.vbv").exists());
        let back = read_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(back, ds);
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest.scenes[2].split, "test");
    }

    #[test]
    fn loss_log_round_trip() {
        let log = vec![
            LogEntry {
                step: 1,
                l_r: 0.5,
                l_s: 0.25,
                l_m: 3.0,
                total: 6.0,
            },
            LogEntry {
                step: 2,
                l_r: 0.4,
                l_s: 0.2,
                l_m: 2.0,
                total: 5.0,
            },
        ];
        let mut buf = Vec::new();
        write_loss_log(&mut buf, &log).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"step\":1,\"L_R\":0.5,\"L_S\":0.25,\"L_M\":3.0,\"total\":6.0}\n"));
        assert_eq!(read_loss_log(buf.as_slice()).unwrap(), log);
    }
}
