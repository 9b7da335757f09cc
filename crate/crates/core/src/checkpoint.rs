//! Versioned binary checkpoint: magic `SGS1`, a format version, then
//! little-endian sections for the Gaussians, the field, the decoder and the
//! optimizer moments. Floats are stored as raw `f64` bits, so a round trip is
//! exact.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::field::{FeatureField, FieldConfig};
use crate::model::Model;
use crate::optim::{Moments, OptimState};
use crate::scene::{Gaussian, GaussianSet, Tier};

pub const MAGIC: &[u8; 4] = b"SGS1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optim: OptimState,
    /// Training iterations completed so far, over all stages.
    pub iteration: u64,
    /// The configuration text the model was trained with.
    pub config_echo: String,
}

type W<'a> = &'a mut dyn Write;

fn put_len(w: W, n: usize) -> Result<()> {
    w.write_u64::<LittleEndian>(n as u64)?;
    Ok(())
}

fn put_f64s(w: W, v: &[f64]) -> Result<()> {
    put_len(w, v.len())?;
    for x in v {
        w.write_f64::<LittleEndian>(*x)?;
    }
    Ok(())
}

fn get_len(r: &mut impl Read, limit: usize) -> Result<usize> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    if n > limit {
        return Err(Error::BadCheckpoint(format!("length {n} exceeds remaining data")));
    }
    Ok(n)
}

fn get_f64s(r: &mut Cursor<&[u8]>) -> Result<Vec<f64>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    let n = get_len(r, remaining / 8)?;
    let mut v = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

fn put_section(w: &mut Vec<u8>, tag: &[u8; 4], body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    body(&mut buf)?;
    w.write_all(tag)?;
    put_len(w, buf.len())?;
    w.write_all(&buf)?;
    Ok(())
}

fn get_section<'a>(r: &mut Cursor<&'a [u8]>, tag: &[u8; 4]) -> Result<Cursor<&'a [u8]>> {
    let mut t = [0u8; 4];
    r.read_exact(&mut t)?;
    if &t != tag {
        return Err(Error::BadCheckpoint(format!(
            "expected section {:?}, found {:?}",
            String::from_utf8_lossy(tag),
            String::from_utf8_lossy(&t)
        )));
    }
    let data: &'a [u8] = r.get_ref();
    let start = r.position() as usize;
    let n = get_len(r, data.len() - start - 8)?;
    let begin = start + 8;
    r.set_position((begin + n) as u64);
    Ok(Cursor::new(&data[begin..begin + n]))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        put_section(&mut out, b"META", |w| {
            w.write_u64::<LittleEndian>(self.iteration)?;
            put_len(w, self.config_echo.len())?;
            w.write_all(self.config_echo.as_bytes())?;
            Ok(())
        })?;
        put_section(&mut out, b"GAUS", |w| {
            let g = &self.model.gaussians;
            put_len(w, g.len())?;
            for i in 0..g.len() {
                for v in g.positions[i].iter().chain(&g.log_scales[i]).chain(&g.rotations[i]) {
                    w.write_f64::<LittleEndian>(*v)?;
                }
                w.write_f64::<LittleEndian>(g.opacity_logits[i])?;
                w.write_u8(match g.tiers[i] {
                    Tier::Coarse => 0,
                    Tier::Fine => 1,
                })?;
            }
            Ok(())
        })?;
        put_section(&mut out, b"FILD", |w| {
            let c = &self.model.field.config;
            for v in [c.levels as u32, c.log2_table_size, c.features_per_level as u32, c.base_resolution, c.max_resolution, c.hidden as u32] {
                w.write_u32::<LittleEndian>(v)?;
            }
            w.write_f64::<LittleEndian>(c.init_scale)?;
            put_f64s(w, &self.model.field.tables)?;
            put_f64s(w, &self.model.field.mlp.params)
        })?;
        put_section(&mut out, b"DECO", |w| {
            let c = &self.model.decoder.config;
            for v in [c.in_channels, c.width, c.bottleneck, c.in_kernel, c.mid_kernel, c.out_channels] {
                w.write_u32::<LittleEndian>(v as u32)?;
            }
            put_f64s(w, &self.model.decoder.params)
        })?;
        put_section(&mut out, b"OPTM", |w| {
            let o = &self.optim;
            w.write_u64::<LittleEndian>(o.step)?;
            for m in [&o.positions, &o.log_scales, &o.rotations, &o.opacity_logits, &o.tables, &o.mlp, &o.decoder] {
                put_f64s(w, &m.m)?;
                put_f64s(w, &m.v)?;
            }
            Ok(())
        })?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::BadCheckpoint("file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::BadCheckpoint("missing SGS1 magic".into()));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::BadCheckpoint("file too short".into()))?;
        if version != VERSION {
            return Err(Error::VersionMismatch(version));
        }
        Self::read_sections(&mut r).map_err(|e| match e {
            Error::Io(io) => Error::BadCheckpoint(format!("truncated checkpoint: {io}")),
            other => other,
        })
    }

    fn read_sections(r: &mut Cursor<&[u8]>) -> Result<Self> {
        let total = r.get_ref().len();
        let mut s = get_section(r, b"META")?;
        let iteration = s.read_u64::<LittleEndian>()?;
        let n = get_len(&mut s, total)?;
        let mut text = vec![0u8; n];
        s.read_exact(&mut text)?;
        let config_echo = String::from_utf8(text).map_err(|e| Error::BadCheckpoint(e.to_string()))?;

        let mut s = get_section(r, b"GAUS")?;
        // 11 floats and a tier byte per Gaussian.
        let n = get_len(&mut s, total / 89)?;
        let mut gaussians = GaussianSet::default();
        for _ in 0..n {
            let mut v = [0.0; 11];
            s.read_f64_into::<LittleEndian>(&mut v)?;
            let tier = match s.read_u8()? {
                0 => Tier::Coarse,
                1 => Tier::Fine,
                t => return Err(Error::BadCheckpoint(format!("unknown tier {t}"))),
            };
            gaussians.push(Gaussian {
                position: [v[0], v[1], v[2]],
                log_scale: [v[3], v[4], v[5]],
                rotation: [v[6], v[7], v[8], v[9]],
                opacity_logit: v[10],
                tier,
            });
        }

        let mut s = get_section(r, b"FILD")?;
        let mut d = [0u32; 6];
        s.read_u32_into::<LittleEndian>(&mut d)?;
        let config = FieldConfig {
            levels: d[0] as usize,
            log2_table_size: d[1],
            features_per_level: d[2] as usize,
            base_resolution: d[3],
            max_resolution: d[4],
            hidden: d[5] as usize,
            init_scale: s.read_f64::<LittleEndian>()?,
        };
        let mut field = FeatureField::zeros(config)
            .map_err(|e| Error::BadCheckpoint(format!("field config: {e}")))?;
        let tables = get_f64s(&mut s)?;
        let mlp = get_f64s(&mut s)?;
        if tables.len() != field.tables.len() || mlp.len() != field.mlp.params.len() {
            return Err(Error::BadCheckpoint("field parameter sizes do not match its config".into()));
        }
        field.tables = tables;
        field.mlp.params = mlp;

        let mut s = get_section(r, b"DECO")?;
        let mut d = [0u32; 6];
        s.read_u32_into::<LittleEndian>(&mut d)?;
        let config = DecoderConfig {
            in_channels: d[0] as usize,
            width: d[1] as usize,
            bottleneck: d[2] as usize,
            in_kernel: d[3] as usize,
            mid_kernel: d[4] as usize,
            out_channels: d[5] as usize,
        };
        let mut decoder = Decoder::zeros(config)
            .map_err(|e| Error::BadCheckpoint(format!("decoder config: {e}")))?;
        let params = get_f64s(&mut s)?;
        if params.len() != decoder.params.len() {
            return Err(Error::BadCheckpoint("decoder parameter count does not match its config".into()));
        }
        decoder.params = params;

        let mut s = get_section(r, b"OPTM")?;
        let step = s.read_u64::<LittleEndian>()?;
        let mut groups = Vec::with_capacity(7);
        for _ in 0..7 {
            let m = get_f64s(&mut s)?;
            let v = get_f64s(&mut s)?;
            groups.push(Moments { m, v });
        }
        let mut it = groups.into_iter();
        let mut next = || it.next().expect("seven groups");
        let optim = OptimState {
            step,
            positions: next(),
            log_scales: next(),
            rotations: next(),
            opacity_logits: next(),
            tables: next(),
            mlp: next(),
            decoder: next(),
            ..OptimState::default()
        };
        if r.position() as usize != total {
            return Err(Error::BadCheckpoint("trailing bytes".into()));
        }
        let model = Model {
            gaussians,
            field,
            decoder,
        };
        if !optim.matches(&model) {
            return Err(Error::BadCheckpoint("optimizer state does not match the model".into()));
        }
        Ok(Self {
            model,
            optim,
            iteration,
            config_echo,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
