//! Flat binary raster files.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   4 bytes  "CISR"
//! height  u32
//! width   u32
//! channels u32
//! dtype   u8       1 = u8, 2 = u16, 3 = f32, 4 = f64
//! payload height * width * channels values, row-major, channels interleaved
//! ```
//!
//! Each raster may carry a JSON sidecar (`<file>.json`) with scene metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::ScoreTensor;
use crate::schedule::ClassId;
use crate::synth::{Image, LabelRaster, SaliencyMask, CHANNELS};

pub const MAGIC: &[u8; 4] = b"CISR";
const HEADER_LEN: usize = 17;

#[derive(Debug, Clone, PartialEq)]
pub enum RasterData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl RasterData {
    fn code(&self) -> u8 {
        match self {
            RasterData::U8(_) => 1,
            RasterData::U16(_) => 2,
            RasterData::F32(_) => 3,
            RasterData::F64(_) => 4,
        }
    }

    fn len(&self) -> usize {
        match self {
            RasterData::U8(v) => v.len(),
            RasterData::U16(v) => v.len(),
            RasterData::F32(v) => v.len(),
            RasterData::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: RasterData,
}

impl Raster {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.push(self.data.code());
        match &self.data {
            RasterData::U8(v) => out.extend_from_slice(v),
            RasterData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RasterData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RasterData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::corrupt("raster shorter than its header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::corrupt("bad raster magic"));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (height, width, channels) = (word(4), word(8), word(12));
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::corrupt("raster dimensions overflow"))?;
        let payload = &bytes[HEADER_LEN..];
        let elem = match bytes[16] {
            1 => 1,
            2 => 2,
            3 => 4,
            4 => 8,
            code => return Err(Error::corrupt(format!("unknown dtype code {code}"))),
        };
        if payload.len() != n * elem {
            return Err(Error::corrupt(format!(
                "raster payload is {} bytes, header implies {}",
                payload.len(),
                n * elem
            )));
        }
        let data = match bytes[16] {
            1 => RasterData::U8(payload.to_vec()),
            2 => RasterData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            3 => RasterData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => RasterData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn from_image(img: &Image) -> Self {
        Self {
            height: img.height,
            width: img.width,
            channels: CHANNELS,
            data: RasterData::F32(img.data.clone()),
        }
    }

    pub fn from_labels(labels: &LabelRaster) -> Self {
        Self {
            height: labels.height,
            width: labels.width,
            channels: 1,
            data: RasterData::U16(labels.ids.iter().map(|c| c.0).collect()),
        }
    }

    pub fn from_saliency(mask: &SaliencyMask) -> Self {
        Self {
            height: mask.height,
            width: mask.width,
            channels: 1,
            data: RasterData::U8(mask.mask.iter().map(|&m| m as u8).collect()),
        }
    }

    /// Score dump; channel order follows `scores.classes`.
    pub fn from_scores(scores: &ScoreTensor) -> Self {
        Self {
            height: scores.height,
            width: scores.width,
            channels: scores.classes.len(),
            data: RasterData::F64(scores.data.clone()),
        }
    }

    pub fn to_image(&self) -> Result<Image> {
        match &self.data {
            RasterData::F32(v) if self.channels == CHANNELS => {
                Image::from_data(self.height, self.width, v.clone())
            }
            _ => Err(Error::shape("image rasters must be 3-channel f32")),
        }
    }

    pub fn to_labels(&self) -> Result<LabelRaster> {
        if self.channels != 1 {
            return Err(Error::shape("label rasters must have one channel"));
        }
        let ids = match &self.data {
            RasterData::U8(v) => v.iter().map(|&x| ClassId(x as u16)).collect(),
            RasterData::U16(v) => v.iter().map(|&x| ClassId(x)).collect(),
            _ => return Err(Error::shape("label rasters must be integer typed")),
        };
        LabelRaster::from_ids(self.height, self.width, ids)
    }

    pub fn to_saliency(&self) -> Result<SaliencyMask> {
        if self.channels != 1 {
            return Err(Error::shape("saliency rasters must have one channel"));
        }
        let mask: Vec<bool> = match &self.data {
            RasterData::U8(v) => v.iter().map(|&x| x != 0).collect(),
            RasterData::U16(v) => v.iter().map(|&x| x != 0).collect(),
            _ => return Err(Error::shape("saliency rasters must be integer typed")),
        };
        Ok(SaliencyMask {
            height: self.height,
            width: self.width,
            mask,
        })
    }

    pub fn to_scores(&self, classes: Vec<ClassId>) -> Result<ScoreTensor> {
        if classes.len() != self.channels {
            return Err(Error::shape(format!(
                "score raster has {} channels but {} classes were named",
                self.channels,
                classes.len()
            )));
        }
        let data: Vec<f64> = match &self.data {
            RasterData::F64(v) => v.clone(),
            RasterData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            _ => return Err(Error::shape("score rasters must be float typed")),
        };
        ScoreTensor::new(self.height, self.width, classes, data)
    }
}

/// Sidecar metadata written next to each exported scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_seed: u64,
    pub task: usize,
    pub height: usize,
    pub width: usize,
    pub classes_present: Vec<ClassId>,
    pub task_classes_present: Vec<ClassId>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let r = Raster {
            height: 2,
            width: 3,
            channels: 1,
            data: RasterData::U8(vec![0, 1, 2, 3, 4, 5]),
        };
        let bytes = r.encode();
        assert_eq!(&bytes[..4], b"CISR");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], 1);
        assert_eq!(&bytes[17..], &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let r = Raster {
            height: 2,
            width: 2,
            channels: 1,
            data: RasterData::U16(vec![1, 2, 3, 4]),
        };
        let bytes = r.encode();
        assert!(matches!(
            Raster::decode(&bytes[..bytes.len() - 1]),
            Err(Error::Corrupt(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Raster::decode(&bad), Err(Error::Corrupt(_))));
        let mut bad_code = bytes;
        bad_code[16] = 9;
        assert!(matches!(Raster::decode(&bad_code), Err(Error::Corrupt(_))));
    }

    proptest! {
        #[test]
        fn f32_round_trip(h in 1usize..6, w in 1usize..6, c in 1usize..4, seed in any::<u64>()) {
            let mut x = seed;
            let data: Vec<f32> = (0..h * w * c).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
                f32::from_bits((x >> 32) as u32 & 0x7f7f_ffff)
            }).collect();
            let r = Raster { height: h, width: w, channels: c, data: RasterData::F32(data) };
            prop_assert_eq!(Raster::decode(&r.encode()).unwrap(), r);
        }
    }
}
