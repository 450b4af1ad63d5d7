//! On-disk scene bundles.
//!
//! ```text
//! bundle/
//!   cameras.json            manifest (see `Manifest`)
//!   images/<id>.png         8-bit RGB
//!   labels/<id>.png         16-bit grayscale, pixel value = label
//!   depth/<id>.lgsd         "LGSD" u32 width, u32 height, u32 reserved, f32 LE row-major
//!   unocclusion/<id>_<k>.png 8-bit, nonzero = 1
//! ```
//!
//! Paths inside the manifest are relative to the bundle directory. Manifest
//! keys this crate does not know are carried through load/save untouched.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Luma, Rgb};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::scene::{Camera, DepthMap, Image, Label, LabelMap, Mask, ViewRecord};

pub const MANIFEST: &str = "cameras.json";
const DEPTH_MAGIC: &[u8; 4] = b"LGSD";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthKind {
    #[default]
    Depth,
    /// Larger = nearer; inverted on load.
    Disparity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestView {
    id: String,
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
    split: Split,
    image: String,
    label_map: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<String>,
    #[serde(default, skip_serializing_if = "is_default_kind")]
    depth_kind: DepthKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    unocclusion: BTreeMap<Label, String>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

fn is_default_kind(k: &DepthKind) -> bool {
    *k == DepthKind::Depth
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    #[serde(default)]
    background: [f64; 3],
    #[serde(default)]
    label_count: Option<Label>,
    views: Vec<ManifestView>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BundleView {
    pub view: ViewRecord,
    pub split: Split,
    /// Unrecognized manifest keys of this view.
    pub extra: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub views: Vec<BundleView>,
    pub background: Vector3<f64>,
    pub label_count: Label,
    /// Unrecognized top-level manifest keys.
    pub extra: Map<String, Value>,
}

impl SceneBundle {
    pub fn new(views: Vec<BundleView>, background: Vector3<f64>) -> Self {
        let label_count = views.iter().map(|v| v.view.label_map.max_label()).max().unwrap_or(0);
        Self { views, background, label_count, extra: Map::new() }
    }

    pub fn split(&self, split: Split) -> Vec<ViewRecord> {
        self.views.iter().filter(|v| v.split == split).map(|v| v.view.clone()).collect()
    }

    pub fn train_views(&self) -> Vec<ViewRecord> {
        self.split(Split::Train)
    }

    pub fn test_views(&self) -> Vec<ViewRecord> {
        self.split(Split::Test)
    }

    pub fn view(&self, id: &str) -> Option<&ViewRecord> {
        self.views.iter().find(|v| v.view.id == id).map(|v| &v.view)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::InvalidInput("bundle has no views".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.views {
            v.view.validate()?;
            if !seen.insert(v.view.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate view id {:?}", v.view.id)));
            }
            if v.view.id.is_empty() || v.view.id.contains(['/', '\\']) || v.view.id.starts_with('.') {
                return Err(Error::InvalidInput(format!("view id {:?} is not a valid file stem", v.view.id)));
            }
            let max = v.view.label_map.max_label();
            if max > self.label_count {
                return Err(Error::InvalidInput(format!(
                    "view {} has label {max} above label_count {}",
                    v.view.id, self.label_count
                )));
            }
        }
        Ok(())
    }
}

pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = ImageReader::open(path)?.decode()?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::from_data(w as usize, h as usize, data)
}

fn rgb_buffer(img: &Image) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let data: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    ImageBuffer::from_raw(img.width as u32, img.height as u32, data).expect("buffer size matches dims")
}

/// Values are clamped to `[0, 1]` and rounded to 8 bits.
pub fn write_rgb(img: &Image, path: &Path) -> Result<()> {
    rgb_buffer(img).save(path)?;
    Ok(())
}

/// In-memory PNG with the same quantization as [`write_rgb`].
pub fn encode_rgb_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    rgb_buffer(img).write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// 16-bit or 8-bit single-channel PNG; the pixel value is the label.
pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let (w, h, ids) = match ImageReader::open(path)?.decode()? {
        DynamicImage::ImageLuma16(b) => {
            let (w, h) = b.dimensions();
            (w, h, b.into_raw().into_iter().map(Label::from).collect())
        }
        DynamicImage::ImageLuma8(b) => {
            let (w, h) = b.dimensions();
            (w, h, b.into_raw().into_iter().map(Label::from).collect())
        }
        other => {
            return Err(Error::bundle(
                path,
                "label_map",
                format!("expected single-channel PNG, got {:?}", other.color()),
            ))
        }
    };
    Ok(LabelMap { width: w as usize, height: h as usize, ids })
}

fn label_buffer(map: &LabelMap, path: &Path) -> Result<ImageBuffer<Luma<u16>, Vec<u16>>> {
    let mut data = Vec::with_capacity(map.ids.len());
    for &id in &map.ids {
        let v = u16::try_from(id)
            .map_err(|_| Error::bundle(path, "label_map", format!("label {id} does not fit in 16 bits")))?;
        data.push(v);
    }
    Ok(ImageBuffer::from_raw(map.width as u32, map.height as u32, data).expect("buffer size matches dims"))
}

pub fn write_label_map(map: &LabelMap, path: &Path) -> Result<()> {
    label_buffer(map, path)?.save(path)?;
    Ok(())
}

/// In-memory 16-bit grayscale PNG.
pub fn encode_label_png(map: &LabelMap) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    label_buffer(map, Path::new("<memory>"))?.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = ImageReader::open(path)?.decode()?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask { width: w as usize, height: h as usize, data: img.into_raw().into_iter().map(|v| v != 0).collect() })
}

pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let data: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(mask.width as u32, mask.height as u32, data).expect("buffer size matches dims");
    buf.save(path)?;
    Ok(())
}

pub fn read_depth(path: &Path, kind: DepthKind) -> Result<DepthMap> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != DEPTH_MAGIC {
        return Err(Error::bundle(path, "depth", "missing LGSD header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (w, h) = (word(4), word(8));
    let expected = w.checked_mul(h).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(16));
    if expected != Some(bytes.len()) {
        return Err(Error::bundle(path, "depth", format!("{w}x{h} header but {} payload bytes", bytes.len() - 16)));
    }
    let values: Vec<f32> = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let parsed = match kind {
        DepthKind::Depth => DepthMap::new(w, h, values),
        DepthKind::Disparity => DepthMap::from_disparity(w, h, &values),
    };
    parsed.map_err(|e| Error::bundle(path, "depth", e.to_string()))
}

pub fn write_depth(depth: &DepthMap, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + depth.depth.len() * 4);
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&(depth.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(depth.height as u32).to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    for v in &depth.depth {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn check_dims(path: &Path, field: &str, expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::bundle(
            path,
            field,
            format!("dimensions {}x{} do not match camera {}x{}", actual.0, actual.1, expected.0, expected.1),
        ));
    }
    Ok(())
}

fn load_view(root: &Path, index: usize, mv: ManifestView) -> Result<BundleView> {
    let field = |f: &str| format!("views[{index}].{f}");
    let manifest = root.join(MANIFEST);
    let r = &mv.rotation;
    let rotation = Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]);
    let translation = Vector3::from(mv.translation);
    let camera = Camera::new(mv.fx, mv.fy, mv.cx, mv.cy, mv.width, mv.height, rotation, translation)
        .map_err(|e| Error::bundle(&manifest, field("camera"), e.to_string()))?;
    let dims = camera.dims();

    let resolve = |rel: &str, f: &str| -> Result<PathBuf> {
        let p = root.join(rel);
        if !p.is_file() {
            return Err(Error::bundle(&p, field(f), "file not found"));
        }
        Ok(p)
    };

    let image_path = resolve(&mv.image, "image")?;
    let image = read_rgb(&image_path).map_err(|e| Error::bundle(&image_path, field("image"), e.to_string()))?;
    check_dims(&image_path, &field("image"), dims, image.dims())?;

    let label_path = resolve(&mv.label_map, "label_map")?;
    let label_map = read_label_map(&label_path)?;
    check_dims(&label_path, &field("label_map"), dims, label_map.dims())?;

    let depth_map = match &mv.depth {
        Some(rel) => {
            let p = resolve(rel, "depth")?;
            let d = read_depth(&p, mv.depth_kind)?;
            check_dims(&p, &field("depth"), dims, d.dims())?;
            Some(d)
        }
        None => None,
    };

    let mut unocclusion = BTreeMap::new();
    for (&k, rel) in &mv.unocclusion {
        let p = resolve(rel, &format!("unocclusion.{k}"))?;
        let m = read_mask(&p)?;
        check_dims(&p, &field(&format!("unocclusion.{k}")), dims, m.dims())?;
        unocclusion.insert(k, m);
    }

    Ok(BundleView {
        view: ViewRecord { id: mv.id, camera, image, label_map, depth_map, unocclusion },
        split: mv.split,
        extra: mv.extra,
    })
}

pub fn load_bundle(dir: &Path) -> Result<SceneBundle> {
    let manifest_path = dir.join(MANIFEST);
    let text =
        fs::read_to_string(&manifest_path).map_err(|e| Error::bundle(&manifest_path, "manifest", e.to_string()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::bundle(&manifest_path, "manifest", e.to_string()))?;
    if manifest.views.is_empty() {
        return Err(Error::bundle(&manifest_path, "views", "bundle has no views"));
    }
    if let Some(i) = manifest.background.iter().position(|v| !v.is_finite()) {
        return Err(Error::bundle(&manifest_path, format!("background[{i}]"), "not finite"));
    }
    let views: Vec<BundleView> =
        manifest.views.into_par_iter().enumerate().map(|(i, mv)| load_view(dir, i, mv)).collect::<Result<_>>()?;
    let observed = views.iter().map(|v| v.view.label_map.max_label()).max().unwrap_or(0);
    let bundle = SceneBundle {
        views,
        background: Vector3::from(manifest.background),
        label_count: manifest.label_count.unwrap_or(observed),
        extra: manifest.extra,
    };
    bundle.validate().map_err(|e| Error::bundle(&manifest_path, "views", e.to_string()))?;
    Ok(bundle)
}

pub fn save_bundle(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    for sub in ["images", "labels"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    if bundle.views.iter().any(|v| v.view.depth_map.is_some()) {
        fs::create_dir_all(dir.join("depth"))?;
    }
    if bundle.views.iter().any(|v| !v.view.unocclusion.is_empty()) {
        fs::create_dir_all(dir.join("unocclusion"))?;
    }
    let entries: Vec<ManifestView> = bundle
        .views
        .par_iter()
        .map(|bv| -> Result<ManifestView> {
            let v = &bv.view;
            let image = format!("images/{}.png", v.id);
            write_rgb(&v.image, &dir.join(&image))?;
            let label_map = format!("labels/{}.png", v.id);
            write_label_map(&v.label_map, &dir.join(&label_map))?;
            let depth = match &v.depth_map {
                Some(d) => {
                    let rel = format!("depth/{}.lgsd", v.id);
                    write_depth(d, &dir.join(&rel))?;
                    Some(rel)
                }
                None => None,
            };
            let mut unocclusion = BTreeMap::new();
            for (k, m) in &v.unocclusion {
                let rel = format!("unocclusion/{}_{k}.png", v.id);
                write_mask(m, &dir.join(&rel))?;
                unocclusion.insert(*k, rel);
            }
            let c = &v.camera;
            Ok(ManifestView {
                id: v.id.clone(),
                width: c.width,
                height: c.height,
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                rotation: c.rotation.transpose().as_slice().try_into().unwrap(),
                translation: c.translation.into(),
                split: bv.split,
                image,
                label_map,
                depth,
                depth_kind: DepthKind::Depth,
                unocclusion,
                extra: bv.extra.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        background: bundle.background.into(),
        label_count: Some(bundle.label_count),
        views: entries,
        extra: bundle.extra.clone(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Writes a rendered frame sequence as `frames/00000.png, ...` plus
/// `frames.json` listing which frames are real training views.
pub fn save_frames(images: &[Image], originals: &[Option<usize>], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    images.par_iter().enumerate().try_for_each(|(i, img)| write_rgb(img, &dir.join(format!("{i:05}.png"))))?;
    let index = serde_json::json!({ "frames": images.len(), "originals": originals });
    fs::write(dir.join("frames.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

/// Original-frame flags of a sequence written by `save_frames`.
pub fn load_frame_flags(dir: &Path) -> Result<Vec<bool>> {
    let path = dir.join("frames.json");
    let v: Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let arr = v["originals"].as_array().ok_or_else(|| Error::bundle(&path, "originals", "missing array"))?;
    Ok(arr.iter().map(|o| !o.is_null()).collect())
}

/// Tracked label maps `<dir>/00000.png, ...`, `count` of them.
pub fn load_tracked(dir: &Path, count: usize) -> Result<Vec<LabelMap>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let p = dir.join(format!("{i:05}.png"));
            if !p.is_file() {
                return Err(Error::bundle(&p, format!("tracked[{i}]"), "file not found"));
            }
            read_label_map(&p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::DepthMap;

    fn tiny_view(id: &str) -> ViewRecord {
        let cam = Camera::new(10.0, 10.0, 2.0, 1.5, 4, 3, Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let mut img = Image::new(4, 3);
        img.data[5] = 128.0 / 255.0;
        let mut lm = LabelMap::new(4, 3);
        lm.ids[2] = 300;
        ViewRecord::new(id, cam, img, lm).unwrap()
    }

    #[test]
    fn round_trip_with_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = tiny_view("a");
        v.depth_map = Some(DepthMap::new(4, 3, vec![1.5; 12]).unwrap());
        let mut m = Mask::new(4, 3, true);
        m.data[0] = false;
        v.unocclusion.insert(300, m);
        let mut extra = Map::new();
        extra.insert("exposure".into(), Value::from(1.25));
        let mut b =
            SceneBundle::new(vec![BundleView { view: v, split: Split::Train, extra }], Vector3::new(0.1, 0.2, 0.3));
        b.extra.insert("source".into(), Value::from("tracker-x"));
        save_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn missing_file_is_reported_with_field() {
        let dir = tempfile::tempdir().unwrap();
        let b = SceneBundle::new(
            vec![BundleView { view: tiny_view("a"), split: Split::Test, extra: Map::new() }],
            Vector3::zeros(),
        );
        save_bundle(&b, dir.path()).unwrap();
        fs::remove_file(dir.path().join("labels/a.png")).unwrap();
        let err = load_bundle(dir.path()).unwrap_err().to_string();
        assert!(err.contains("views[0].label_map"), "{err}");
    }

    #[test]
    fn empty_bundle_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), r#"{"views": []}"#).unwrap();
        assert!(load_bundle(dir.path()).is_err());
    }

    #[test]
    fn truncated_depth_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.lgsd");
        write_depth(&DepthMap::new(2, 2, vec![1.0; 4]).unwrap(), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(read_depth(&p, DepthKind::Depth).is_err());
    }

    #[test]
    fn non_finite_depth_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.lgsd");
        let mut bytes = b"LGSD".to_vec();
        for v in [1u32, 1, 0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        let err = read_depth(&p, DepthKind::Depth).unwrap_err().to_string();
        assert!(err.contains("depth"), "{err}");
    }
}
