//! Flat little-endian dataset file.
//!
//! ```text
//! magic     4 bytes  "TDVS"
//! version   u32      1
//! videos    u32
//! frames    u32      T
//! height    u32      H
//! width     u32      W
//! channels  u32      C
//! classes   u32      k
//! then per video:
//!   T·H·W·C  f64     frames, row-major (frame, row, col, channel)
//!   T records of 16 bytes: u32 class, i32 center row, i32 center col, u32 visible (0/1)
//! ```

use std::io::{Read, Write};

use super::generate::{FrameLabel, SyntheticVideo};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"TDVS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub videos: Vec<SyntheticVideo>,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in 32 bits")))
}

impl Dataset {
    fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        let Some(first) = self.videos.first() else {
            return Ok((0, 0, 0, 0));
        };
        let t = first.frames.len();
        let [h, w, c] = *first.frames.first().map(|f| f.shape()).unwrap_or(&[0, 0, 0]) else {
            return format_err("frames must be H x W x C");
        };
        for v in &self.videos {
            if v.frames.len() != t || v.labels.len() != t || v.frames.iter().any(|f| f.shape() != [h, w, c]) {
                return format_err("all videos must share frame count and frame shape");
            }
        }
        Ok((t, h, w, c))
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let (t, h, w, c) = self.dims()?;
        out.write_all(MAGIC)?;
        for (v, what) in [
            (VERSION as usize, "version"),
            (self.videos.len(), "video count"),
            (t, "frame count"),
            (h, "height"),
            (w, "width"),
            (c, "channels"),
            (self.classes, "classes"),
        ] {
            out.write_all(&u32_of(v, what)?.to_le_bytes())?;
        }
        for v in &self.videos {
            for f in &v.frames {
                for x in f.data() {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
            for l in &v.labels {
                out.write_all(&u32_of(l.class, "class")?.to_le_bytes())?;
                out.write_all(&l.center.0.to_le_bytes())?;
                out.write_all(&l.center.1.to_le_bytes())?;
                out.write_all(&u32::from(l.visible).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return format_err("not a dataset file (bad magic)");
        }
        let mut word = || -> Result<u32> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = word()?;
        if version != VERSION {
            return format_err(format!("unsupported dataset version {version}"));
        }
        let [n, t, h, w, c, classes] = [word()?, word()?, word()?, word()?, word()?, word()?].map(|v| v as usize);
        let mut videos = Vec::with_capacity(n.min(1 << 16));
        let mut buf8 = [0u8; 8];
        let mut buf4 = [0u8; 4];
        for _ in 0..n {
            let mut frames = Vec::with_capacity(t);
            for _ in 0..t {
                let mut data = Vec::with_capacity(h * w * c);
                for _ in 0..h * w * c {
                    input.read_exact(&mut buf8)?;
                    data.push(f64::from_le_bytes(buf8));
                }
                frames.push(Tensor::new(&[h, w, c], data)?);
            }
            let mut labels = Vec::with_capacity(t);
            for _ in 0..t {
                let mut field = || -> Result<[u8; 4]> {
                    input.read_exact(&mut buf4)?;
                    Ok(buf4)
                };
                let class = u32::from_le_bytes(field()?) as usize;
                let cy = i32::from_le_bytes(field()?);
                let cx = i32::from_le_bytes(field()?);
                let visible = match u32::from_le_bytes(field()?) {
                    0 => false,
                    1 => true,
                    v => return format_err(format!("visible flag must be 0 or 1, got {v}")),
                };
                if class >= classes {
                    return format_err(format!("class {class} out of range {classes}"));
                }
                labels.push(FrameLabel {
                    class,
                    center: (cy, cx),
                    visible,
                });
            }
            videos.push(SyntheticVideo { frames, labels });
        }
        Ok(Self { classes, videos })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthtask::{generate_dataset, GenParams};

    #[test]
    fn round_trip() {
        let p = GenParams {
            frames: 8,
            occlusion_prob: 0.5,
            ..GenParams::default()
        };
        let d = Dataset {
            classes: 4,
            videos: generate_dataset(2, 3, &p).unwrap(),
        };
        let mut bytes = Vec::new();
        d.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 32 + 3 * 8 * (32 * 32 * 8 + 16));
        assert_eq!(&bytes[..4], b"TDVS");
        assert_eq!(Dataset::read_from(&bytes[..]).unwrap(), d);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Dataset::read_from(&b"NOPE0000"[..]), Err(Error::Format(_))));
        let mut bytes = Vec::new();
        Dataset { classes: 2, videos: vec![] }.write_to(&mut bytes).unwrap();
        bytes[4] = 9;
        assert!(matches!(Dataset::read_from(&bytes[..]), Err(Error::Format(_))));
        // truncated body
        let d = Dataset {
            classes: 4,
            videos: generate_dataset(1, 1, &GenParams::default()).unwrap(),
        };
        let mut bytes = Vec::new();
        d.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Dataset::read_from(&bytes[..]), Err(Error::Io(_))));
    }
}
