//! Float and 8-bit image I/O: PFM, PNG, cubemap face sets.

use std::io::Write;
use std::path::Path;

use crate::envlight::{CubeMap, FACES};
use crate::error::{Error, Result};
use crate::shading::display_map;

/// Row-major float image, row 0 at the top, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f32]) -> Self {
        let mut im = Self::new(width, height, value.len());
        for px in im.data.chunks_exact_mut(value.len()) {
            px.copy_from_slice(value);
        }
        im
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

pub fn write_pfm(path: &Path, im: &Image) -> Result<()> {
    let tag = match im.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::invalid(format!("PFM holds 1 or 3 channels, not {c}"))),
    };
    let mut buf = format!("{tag}\n{} {}\n-1.0\n", im.width, im.height).into_bytes();
    let row = im.width * im.channels;
    for y in (0..im.height).rev() {
        for v in &im.data[y * row..(y + 1) * row] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut token = |buf: &[u8]| -> Result<(String, usize)> {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, start as u64, "truncated PFM header"));
        }
        let s = String::from_utf8_lossy(&buf[start..pos]).into_owned();
        Ok((s, start))
    };
    let (tag, _) = token(&buf)?;
    let channels = match tag.as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(Error::format(path, 0, format!("bad PFM tag {tag:?}"))),
    };
    let mut num = |what: &str| -> Result<f64> {
        let (s, off) = token(&buf)?;
        s.parse::<f64>()
            .map_err(|_| Error::format(path, off as u64, format!("bad PFM {what} {s:?}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let scale = num("scale")?;
    if width < 1.0 || height < 1.0 || width.fract() != 0.0 || height.fract() != 0.0 {
        return Err(Error::format(path, 3, "bad PFM dimensions"));
    }
    let (width, height) = (width as usize, height as usize);
    // Exactly one whitespace byte separates the header from the data.
    let data_start = pos + 1;
    let n = width * height * channels;
    if buf.len() < data_start + n * 4 {
        return Err(Error::format(
            path,
            buf.len() as u64,
            format!("PFM data truncated: need {} bytes", n * 4),
        ));
    }
    let little = scale < 0.0;
    let mut im = Image::new(width, height, channels);
    let row = width * channels;
    for (k, c) in buf[data_start..data_start + n * 4].chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().unwrap();
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let file_row = k / row;
        let y = height - 1 - file_row;
        im.data[y * row + k % row] = v;
    }
    Ok(im)
}

/// Writes display-space values in [0, 1] as an 8-bit PNG.
pub fn write_png(path: &Path, im: &Image) -> Result<()> {
    let to8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8;
    let (w, h) = (im.width as u32, im.height as u32);
    let res = match im.channels {
        1 => image::GrayImage::from_raw(w, h, im.data.iter().map(|v| to8(*v)).collect())
            .map(|b| b.save(path)),
        3 => image::RgbImage::from_raw(w, h, im.data.iter().map(|v| to8(*v)).collect())
            .map(|b| b.save(path)),
        c => return Err(Error::invalid(format!("PNG export needs 1 or 3 channels, not {c}"))),
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(Error::Image {
            path: path.into(),
            msg: e.to_string(),
        }),
        None => Err(Error::invalid("image buffer size mismatch")),
    }
}

/// Reads an 8-bit PNG as RGB in [0, 1].
pub fn read_png_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb32f();
    Ok(Image {
        width: rgb.width() as usize,
        height: rgb.height() as usize,
        channels: 3,
        data: rgb.into_raw(),
    })
}

/// Reads a PNG mask as one channel in {0, 1} (threshold at one half).
pub fn read_png_mask(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        msg: e.to_string(),
    })?;
    let l = img.to_luma32f();
    Ok(Image {
        width: l.width() as usize,
        height: l.height() as usize,
        channels: 1,
        data: l.into_raw().into_iter().map(|v| if v > 0.5 { 1.0 } else { 0.0 }).collect(),
    })
}

/// Reads a linear image from PFM or an sRGB-encoded PNG (decoded to linear
/// when `linearize` is set).
pub fn read_image(path: &Path, linearize: bool) -> Result<Image> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("pfm") => read_pfm(path),
        _ => {
            let mut im = read_png_rgb(path)?;
            if linearize {
                for v in im.data.iter_mut() {
                    *v = crate::shading::srgb_to_linear(*v as f64) as f32;
                }
            }
            Ok(im)
        }
    }
}

const FACE_FILES: [&str; FACES] = ["px.pfm", "nx.pfm", "py.pfm", "ny.pfm", "pz.pfm", "nz.pfm"];
const MANIFEST: &str = "cubemap.txt";

/// Writes one PFM per face plus a small manifest into `dir`.
pub fn save_cubemap_pfm(dir: &Path, map: &CubeMap) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let r = map.res;
    let face_len = r * r * map.channels;
    for (f, name) in FACE_FILES.iter().enumerate() {
        let im = Image {
            width: r,
            height: r,
            channels: map.channels,
            data: map.data[f * face_len..(f + 1) * face_len].to_vec(),
        };
        write_pfm(&dir.join(name), &im)?;
    }
    let manifest = format!(
        "# faces +X -X +Y -Y +Z -Z, row 0 at the top\nresolution {r}\nchannels {}\n{}\n",
        map.channels,
        FACE_FILES.join("\n")
    );
    let p = dir.join(MANIFEST);
    std::fs::write(&p, manifest).map_err(|e| Error::io(&p, e))
}

pub fn load_cubemap_pfm(dir: &Path) -> Result<CubeMap> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut res = None;
    let mut channels = None;
    let mut files = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let key = it.next().unwrap_or_default();
        let parse = |v: Option<&str>| -> Result<usize> {
            v.and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
                path: mpath.clone(),
                line: ln + 1,
                msg: format!("bad value for {key}"),
            })
        };
        match key {
            "resolution" => res = Some(parse(it.next())?),
            "channels" => channels = Some(parse(it.next())?),
            name => files.push(name.to_string()),
        }
    }
    let (res, channels) = match (res, channels) {
        (Some(r), Some(c)) if r > 0 && c > 0 => (r, c),
        _ => {
            return Err(Error::Parse {
                path: mpath,
                line: 0,
                msg: "manifest lacks resolution/channels".into(),
            })
        }
    };
    if files.len() != FACES {
        return Err(Error::Parse {
            path: mpath,
            line: 0,
            msg: format!("expected 6 face files, found {}", files.len()),
        });
    }
    let mut map = CubeMap::new(res, channels);
    let face_len = res * res * channels;
    for (f, name) in files.iter().enumerate() {
        let p = dir.join(name);
        let im = read_pfm(&p)?;
        if im.width != res || im.height != res || im.channels != channels {
            return Err(Error::format(&p, 0, "face size does not match manifest"));
        }
        map.data[f * face_len..(f + 1) * face_len].copy_from_slice(&im.data);
    }
    Ok(map)
}

/// Horizontal-cross layout (4R x 3R) of a cubemap: +Y on top, then
/// -X +Z +X -Z across the middle, -Y below. Uncovered cells are black.
pub fn cubemap_cross(map: &CubeMap) -> Image {
    let r = map.res;
    let mut im = Image::new(4 * r, 3 * r, map.channels);
    let cells = [(2, 1), (0, 1), (1, 0), (1, 2), (1, 1), (3, 1)];
    for (f, (cx, cy)) in cells.iter().enumerate() {
        for j in 0..r {
            for i in 0..r {
                let t = map.texel_index(f, i, j);
                im.pixel_mut(cx * r + i, cy * r + j)
                    .copy_from_slice(map.texel(t));
            }
        }
    }
    im
}

/// Tone-mapped cross-layout PNG of an HDR cubemap.
pub fn write_cubemap_cross_png(path: &Path, map: &CubeMap) -> Result<()> {
    let mut im = cubemap_cross(map);
    for v in im.data.iter_mut() {
        *v = display_map(*v as f64) as f32;
    }
    write_png(path, &im)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut im = Image::new(5, 3, 3);
        for (k, v) in im.data.iter_mut().enumerate() {
            *v = k as f32 * 0.37 - 2.0;
        }
        let p = dir.path().join("a.pfm");
        write_pfm(&p, &im).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), im);
        let mut g = Image::new(4, 2, 1);
        g.data[3] = 7.5;
        write_pfm(&p, &g).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), g);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&p, bytes).unwrap();
        assert!(read_pfm(&p).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut im = Image::new(4, 4, 3);
        for (k, v) in im.data.iter_mut().enumerate() {
            *v = (k % 7) as f32 / 6.0;
        }
        let p = dir.path().join("a.png");
        write_png(&p, &im).unwrap();
        let back = read_png_rgb(&p).unwrap();
        for (a, b) in im.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn cubemap_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = CubeMap::new(4, 3);
        for (k, v) in m.data.iter_mut().enumerate() {
            *v = k as f32;
        }
        save_cubemap_pfm(dir.path(), &m).unwrap();
        assert_eq!(load_cubemap_pfm(dir.path()).unwrap(), m);
        let cross = cubemap_cross(&m);
        assert_eq!((cross.width, cross.height), (16, 12));
        // +Z texel (0, 0) lands at the top-left of the center cell
        let t = m.texel_index(4, 0, 0);
        assert_eq!(cross.pixel(4, 4), m.texel(t));
        write_cubemap_cross_png(&dir.path().join("c.png"), &m).unwrap();
    }
}
