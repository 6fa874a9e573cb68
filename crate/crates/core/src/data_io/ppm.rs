//! Binary netpbm images: P6 (RGB) read/write, P5 (gray) read with channel replication.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// 8-bit RGB raster, interleaved, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::shape("image", format!("{height}x{width} RGB needs {} bytes, got {}", height * width * 3, data.len())));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        Image {
            height,
            width,
            data: rgb.iter().copied().cycle().take(height * width * 3).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, H, W]` tensor with every byte multiplied by `scale`.
    pub fn to_tensor(&self, scale: f64) -> Tensor {
        let plane = self.height * self.width;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.data[p * 3 + c] as f64 * scale
        })
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Image {
        let mut data = Vec::with_capacity(h * w * 3);
        for r in row..row + h {
            data.extend_from_slice(&self.data[(r * self.width + col) * 3..(r * self.width + col + w) * 3]);
        }
        Image { height: h, width: w, data }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Format {
            path: path.into(),
            message,
        };
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err(bad("truncated header".into())),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                pos += 1;
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token()?;
        let channels = match magic.as_str() {
            "P6" => 3,
            "P5" => 1,
            m => return Err(bad(format!("unsupported magic {m:?}, expected P6 or P5"))),
        };
        let mut num = |what: &str| -> Result<usize> {
            let t = token()?;
            t.parse().map_err(|_| bad(format!("{what} {t:?} is not a positive integer")))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if width == 0 || height == 0 {
            return Err(bad(format!("empty image {width}x{height}")));
        }
        if maxval != 255 {
            return Err(bad(format!("only maxval 255 is supported, got {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        let raster = &bytes[(pos + 1).min(bytes.len())..];
        let need = width * height * channels;
        if raster.len() < need {
            return Err(bad(format!("raster has {} bytes, expected {need}", raster.len())));
        }
        let data = if channels == 3 {
            raster[..need].to_vec()
        } else {
            raster[..need].iter().flat_map(|&g| [g, g, g]).collect()
        };
        Ok(Image { height, width, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes, path)
    }
}
