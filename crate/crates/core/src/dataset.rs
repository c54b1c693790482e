//! Dataset manifests.
//!
//! A manifest is a plain-text table, one view per row, whitespace separated:
//!
//! ```text
//! # comment
//! @colorspace srgb            # or: linear
//! @background 1 1 1
//! @env env                    # optional ground-truth light (cubemap dir)
//! @points points.txt          # optional initial point cloud
//! name  image  width  height  fx  fy  cx  cy  pose  [mask]
//! ```
//!
//! `pose` is twelve comma-separated numbers: the world-to-camera rotation in
//! row-major order followed by the translation. Paths are relative to the
//! manifest's directory. Either every row has a mask or none does; without
//! masks the dataset is maskless.
//!
//! With `srgb`, images hold display values and are used as they are. With
//! `linear`, images hold linear radiance (PFM, or PNG taken as linear) and
//! are mapped to display space by the renderer's tone curve.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::{read_image, read_png_mask, Image};
use crate::math::{Mat3, Vec3};
use crate::shading::display_map;
use crate::splat::Camera;
use crate::train::TrainView;

const REQUIRED: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Colorspace {
    #[default]
    Srgb,
    Linear,
}

impl fmt::Display for Colorspace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Colorspace::Srgb => "srgb",
            Colorspace::Linear => "linear",
        })
    }
}

impl FromStr for Colorspace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "srgb" => Ok(Colorspace::Srgb),
            "linear" => Ok(Colorspace::Linear),
            _ => Err(Error::invalid(format!("unknown colorspace '{s}' (expected srgb or linear)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewEntry {
    pub name: String,
    pub image: PathBuf,
    pub camera: Camera,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Directory the relative paths are resolved against.
    pub root: PathBuf,
    pub views: Vec<ViewEntry>,
    pub colorspace: Colorspace,
    pub background: [f64; 3],
    pub env: Option<PathBuf>,
    pub points: Option<PathBuf>,
}

fn parse_f64(tok: &str, what: &str) -> std::result::Result<f64, String> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("{what}: '{tok}' is not a finite number"))
}

fn parse_usize(tok: &str, what: &str) -> std::result::Result<usize, String> {
    tok.parse::<usize>().map_err(|_| format!("{what}: '{tok}' is not a nonnegative integer"))
}

fn parse_row(f: &[&str]) -> std::result::Result<ViewEntry, String> {
    if f.len() < REQUIRED || f.len() > REQUIRED + 1 {
        return Err(format!(
            "expected {REQUIRED} fields (name image width height fx fy cx cy pose) plus an optional mask, found {}",
            f.len()
        ));
    }
    let width = parse_usize(f[2], "width")?;
    let height = parse_usize(f[3], "height")?;
    let fx = parse_f64(f[4], "fx")?;
    let fy = parse_f64(f[5], "fy")?;
    let cx = parse_f64(f[6], "cx")?;
    let cy = parse_f64(f[7], "cy")?;
    let pose: Vec<f64> = f[8]
        .split(',')
        .map(|t| parse_f64(t, "pose"))
        .collect::<std::result::Result<_, _>>()?;
    if pose.len() != 12 {
        return Err(format!("pose needs 12 comma-separated values, found {}", pose.len()));
    }
    let rot = Mat3::from_row_slice(&pose[..9]);
    let trans = Vec3::new(pose[9], pose[10], pose[11]);
    let camera = Camera::new(fx, fy, cx, cy, width, height, rot, trans).map_err(|e| e.to_string())?;
    Ok(ViewEntry {
        name: f[0].to_string(),
        image: PathBuf::from(f[1]),
        camera,
        mask: f.get(9).map(PathBuf::from),
    })
}

/// Parses manifest text; `path` is used for error messages and as the root.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut ds = Dataset {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        views: Vec::new(),
        colorspace: Colorspace::Srgb,
        background: [1.0; 3],
        env: None,
        points: None,
    };
    let mut with_mask: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let f: Vec<&str> = body.split_whitespace().collect();
        if let Some(key) = f[0].strip_prefix('@') {
            let arg = |n: usize| -> Result<()> {
                if f.len() != n + 1 {
                    return Err(err(line, format!("@{key} takes {n} value(s), found {}", f.len() - 1)));
                }
                Ok(())
            };
            match key {
                "colorspace" => {
                    arg(1)?;
                    ds.colorspace = f[1].parse().map_err(|e: Error| err(line, e.to_string()))?;
                }
                "background" => {
                    arg(3)?;
                    for c in 0..3 {
                        ds.background[c] = parse_f64(f[1 + c], "background").map_err(|m| err(line, m))?;
                    }
                }
                "env" => {
                    arg(1)?;
                    ds.env = Some(PathBuf::from(f[1]));
                }
                "points" => {
                    arg(1)?;
                    ds.points = Some(PathBuf::from(f[1]));
                }
                _ => return Err(err(line, format!("unknown directive '@{key}'"))),
            }
            continue;
        }
        let v = parse_row(&f).map_err(|m| err(line, m))?;
        let has = v.mask.is_some();
        if *with_mask.get_or_insert(has) != has {
            return Err(err(line, "either every view has a mask or none does".into()));
        }
        ds.views.push(v);
    }
    if ds.views.is_empty() {
        return Err(err(text.lines().count().max(1), "manifest lists no views".into()));
    }
    Ok(ds)
}

/// Reads and validates a manifest. Image files are checked for existence;
/// their contents are read by [`Dataset::load_views`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ds = parse_manifest(&text, path)?;
    for v in &ds.views {
        for p in std::iter::once(&v.image).chain(v.mask.as_ref()) {
            let full = ds.resolve(p);
            if !full.is_file() {
                return Err(Error::io(
                    full,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing"),
                ));
            }
        }
    }
    Ok(ds)
}

impl Dataset {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn maskless(&self) -> bool {
        self.views.iter().all(|v| v.mask.is_none())
    }

    pub fn env_path(&self) -> Option<PathBuf> {
        self.env.as_deref().map(|p| self.resolve(p))
    }

    pub fn points_path(&self) -> Option<PathBuf> {
        self.points.as_deref().map(|p| self.resolve(p))
    }

    /// Decodes every view into display space.
    pub fn load_views(&self) -> Result<Vec<TrainView>> {
        self.views
            .iter()
            .map(|v| {
                let path = self.resolve(&v.image);
                let mut image = read_image(&path, false)?;
                let (w, h) = (v.camera.width, v.camera.height);
                if image.width != w || image.height != h {
                    return Err(Error::invalid(format!(
                        "{}: image is {}x{} but the camera is {w}x{h}",
                        path.display(),
                        image.width,
                        image.height
                    )));
                }
                if image.channels != 3 {
                    return Err(Error::invalid(format!("{}: expected an RGB image", path.display())));
                }
                if self.colorspace == Colorspace::Linear {
                    for x in image.data.iter_mut() {
                        *x = display_map(*x as f64) as f32;
                    }
                }
                let mask = match &v.mask {
                    Some(m) => {
                        let mp = self.resolve(m);
                        let mask = read_png_mask(&mp)?;
                        if mask.width != w || mask.height != h {
                            return Err(Error::invalid(format!(
                                "{}: mask is {}x{} but the camera is {w}x{h}",
                                mp.display(),
                                mask.width,
                                mask.height
                            )));
                        }
                        Some(mask)
                    }
                    None => None,
                };
                Ok(TrainView {
                    camera: v.camera.clone(),
                    image,
                    mask,
                })
            })
            .collect()
    }

    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "@colorspace {}", self.colorspace);
        let b = self.background;
        let _ = writeln!(s, "@background {} {} {}", b[0], b[1], b[2]);
        if let Some(e) = &self.env {
            let _ = writeln!(s, "@env {}", e.display());
        }
        if let Some(p) = &self.points {
            let _ = writeln!(s, "@points {}", p.display());
        }
        s.push_str("# name image width height fx fy cx cy pose [mask]\n");
        for v in &self.views {
            let c = &v.camera;
            let r = &c.rot;
            let pose: Vec<String> = (0..3)
                .flat_map(|i| (0..3).map(move |j| r[(i, j)]))
                .chain(c.trans.iter().copied())
                .map(|x| x.to_string())
                .collect();
            let _ = write!(
                s,
                "{} {} {} {} {} {} {} {} {}",
                v.name,
                v.image.display(),
                c.width,
                c.height,
                c.fx,
                c.fy,
                c.cx,
                c.cy,
                pose.join(",")
            );
            if let Some(m) = &v.mask {
                let _ = write!(s, " {}", m.display());
            }
            s.push('\n');
        }
        s
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_manifest()).map_err(|e| Error::io(path, e))
    }
}

/// Point cloud as `x y z` rows, optionally followed by `r g b` in [0, 1].
pub fn read_points(path: &Path) -> Result<(Vec<Vec3>, Option<Vec<[f64; 3]>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pts = Vec::new();
    let mut cols = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let v: Vec<f64> = body
            .split_whitespace()
            .map(|t| parse_f64(t, "coordinate"))
            .collect::<std::result::Result<_, _>>()
            .map_err(err)?;
        match v.len() {
            3 => pts.push(Vec3::new(v[0], v[1], v[2])),
            6 => {
                pts.push(Vec3::new(v[0], v[1], v[2]));
                cols.push([v[3], v[4], v[5]]);
            }
            n => return Err(err(format!("expected 3 or 6 values, found {n}"))),
        }
    }
    if !cols.is_empty() && cols.len() != pts.len() {
        return Err(Error::invalid(format!(
            "{}: colors given for only some points",
            path.display()
        )));
    }
    Ok((pts, (!cols.is_empty()).then_some(cols)))
}

pub fn write_points(path: &Path, pts: &[Vec3]) -> Result<()> {
    let mut s = String::new();
    for p in pts {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes `im` (display values) where a manifest row can point at it.
pub fn write_view_image(path: &Path, im: &Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    crate::io::write_png(path, im)
}
