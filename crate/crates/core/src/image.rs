//! Float images and the PFM container.
//!
//! PFM layout: `PF\n` (colour) or `Pf\n` (greyscale), then `{W} {H}\n`, then
//! the scale line, where a negative scale means little-endian payload. Rows
//! are stored bottom-to-top. Files written here always use scale `-1`.

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use glam::DVec3;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// Row-major (top row first) interleaved float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Image {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_rgb(width: usize, height: usize, pixels: &[DVec3]) -> Image {
        assert_eq!(pixels.len(), width * height);
        let data = pixels
            .iter()
            .flat_map(|p| [p.x as f32, p.y as f32, p.z as f32])
            .collect();
        Image {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn from_gray(width: usize, height: usize, values: &[f64]) -> Image {
        assert_eq!(values.len(), width * height);
        Image {
            width,
            height,
            channels: 1,
            data: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Pixel as an rgb triple; greyscale images are broadcast.
    #[inline]
    pub fn rgb(&self, x: usize, y: usize) -> DVec3 {
        let i = (y * self.width + x) * self.channels;
        if self.channels >= 3 {
            DVec3::new(self.data[i] as f64, self.data[i + 1] as f64, self.data[i + 2] as f64)
        } else {
            DVec3::splat(self.data[i] as f64)
        }
    }

    pub fn to_rgb(&self) -> Vec<DVec3> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .map(|(x, y)| self.rgb(x, y))
            .collect()
    }

    pub fn to_gray(&self) -> Vec<f64> {
        self.data.iter().step_by(self.channels).map(|&v| v as f64).collect()
    }

    pub fn encode_pfm(&self) -> Vec<u8> {
        let tag = match self.channels {
            1 => "Pf",
            3 => "PF",
            c => panic!("PFM supports 1 or 3 channels, got {c}"),
        };
        let mut out = format!("{tag}\n{} {}\n-1\n", self.width, self.height).into_bytes();
        let row_len = self.width * self.channels;
        let mut buf = vec![0u8; row_len * 4];
        for y in (0..self.height).rev() {
            LittleEndian::write_f32_into(&self.data[y * row_len..(y + 1) * row_len], &mut buf);
            out.extend_from_slice(&buf);
        }
        out
    }

    pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Image> {
        let bad = |m: &str| Error::parse(path, m.to_string());
        let mut pos = 0;
        let mut token = || -> Result<String> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(bad(&format!("bad magic {other:?}"))),
        };
        let width: usize = token()?.parse().map_err(|_| bad("bad width"))?;
        let height: usize = token()?.parse().map_err(|_| bad("bad height"))?;
        let scale: f64 = token()?.parse().map_err(|_| bad("bad scale"))?;
        // Exactly one whitespace byte separates the header from the payload.
        pos += 1;
        let row_len = width * channels;
        let need = row_len * height * 4;
        if bytes.len() < pos + need {
            return Err(bad("truncated payload"));
        }
        let payload = &bytes[pos..pos + need];
        let mut data = vec![0f32; row_len * height];
        for file_row in 0..height {
            let y = height - 1 - file_row;
            let src = &payload[file_row * row_len * 4..(file_row + 1) * row_len * 4];
            let dst = &mut data[y * row_len..(y + 1) * row_len];
            if scale < 0.0 {
                LittleEndian::read_f32_into(src, dst);
            } else {
                BigEndian::read_f32_into(src, dst);
            }
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode_pfm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode_pfm(&bytes, path)
    }
}
