//! Dataset ingestion for the Cars196 and VeRi-776 directory layouts, the
//! prepared-dataset spec file, fingerprints and export.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use glamor_core::datamodel::{
    generate_synthetic_with, parse_veri_name, DatasetBuilder, DatasetView, Image, Sample, Split, SyntheticConfig,
};
use image::imageops::FilterType;
use serde_json::json;

use crate::error::{format_error, Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `root/{train,test}/<class_name>/<image>`.
    Cars196,
    /// `root/{image_train,image_query,image_test}/<id>_c<cam>_<frame>.jpg`.
    Veri776,
}

impl Layout {
    pub fn as_str(self) -> &'static str {
        match self {
            Layout::Cars196 => "cars196",
            Layout::Veri776 => "veri776",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cars196" => Some(Layout::Cars196),
            "veri776" => Some(Layout::Veri776),
            _ => None,
        }
    }

    fn splits(self) -> &'static [(&'static str, Split)] {
        match self {
            Layout::Cars196 => &[("train", Split::Train), ("test", Split::Gallery)],
            Layout::Veri776 => {
                &[("image_train", Split::Train), ("image_query", Split::Query), ("image_test", Split::Gallery)]
            }
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> =
        fs::read_dir(dir).at(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>().at(dir)?;
    out.sort();
    Ok(out)
}

/// Decodes an image and resizes it to `size`×`size` RGB in [0,1].
pub fn load_image(path: &Path, size: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
    let rgb = img.to_rgb8();
    let rgb = if rgb.width() as usize == size && rgb.height() as usize == size {
        rgb
    } else {
        image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    };
    let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(Image::new(size, size, data)?)
}

/// Brand key of a Cars196 class directory: the text before the first space
/// or underscore ("Acura RL Sedan 2012" → "Acura").
pub fn brand_key(class_name: &str) -> &str {
    class_name.split([' ', '_']).next().unwrap_or(class_name)
}

/// Reads a dataset tree. Identity ids are remapped to contiguous integers
/// (train identities first); the raw labels stay available through
/// [`DatasetView::identity_labels`].
pub fn ingest_directory(root: &Path, layout: Layout, resolution: usize) -> Result<DatasetView> {
    if !root.is_dir() {
        return Err(Error::Ingest(format!("dataset root {} does not exist", root.display())));
    }
    let mut files: Vec<(PathBuf, String, Option<u32>, Split)> = Vec::new();
    for &(dir, split) in layout.splits() {
        let split_dir = root.join(dir);
        if !split_dir.is_dir() {
            return Err(Error::Ingest(format!("missing split directory `{dir}` under {}", root.display())));
        }
        match layout {
            Layout::Cars196 => {
                for class_dir in sorted_entries(&split_dir)?.into_iter().filter(|p| p.is_dir()) {
                    let class = class_dir.file_name().unwrap().to_string_lossy().into_owned();
                    for path in sorted_entries(&class_dir)?.into_iter().filter(|p| is_image(p)) {
                        files.push((path, class.clone(), None, split));
                    }
                }
            }
            Layout::Veri776 => {
                for path in sorted_entries(&split_dir)?.into_iter().filter(|p| is_image(p)) {
                    let name = path.file_name().unwrap().to_string_lossy().into_owned();
                    let (id, camera) = parse_veri_name(&name).ok_or_else(|| {
                        Error::Ingest(format!("cannot parse identity and camera from {}", path.display()))
                    })?;
                    files.push((path, id, Some(camera), split));
                }
            }
        }
    }
    if files.is_empty() {
        return Err(Error::Ingest("no samples found".into()));
    }
    let mut by_name: HashMap<String, &Path> = HashMap::new();
    for (path, ..) in &files {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if let Some(first) = by_name.insert(name.clone(), path) {
            return Err(Error::Ingest(format!(
                "duplicate image name `{name}`: {} and {}",
                first.display(),
                path.display()
            )));
        }
    }
    let brands: BTreeMap<&str, u32> = {
        let mut keys: Vec<&str> = files.iter().map(|(_, label, ..)| brand_key(label)).collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter().zip(0..).collect()
    };
    let mut builder = DatasetBuilder::new();
    for (path, label, camera, split) in &files {
        let brand_id = (layout == Layout::Cars196).then(|| brands[brand_key(label)]);
        builder.push(
            label.clone(),
            Sample {
                image: load_image(path, resolution)?,
                identity_id: 0,
                brand_id,
                color_id: None,
                type_id: None,
                camera_id: *camera,
                split: *split,
            },
        );
    }
    Ok(builder.build()?)
}

/// Content fingerprint over labels, splits and pixels, in sample order.
pub fn fingerprint(view: &DatasetView) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    let opt = |v: Option<u32>| v.map_or(-1i64, i64::from).to_le_bytes();
    for s in view.samples() {
        h.update(view.identity_labels()[s.identity_id as usize].as_bytes());
        h.update([0]);
        for v in [s.brand_id, s.color_id, s.type_id, s.camera_id] {
            h.update(opt(v));
        }
        h.update([s.split as u8]);
        h.update((s.image.width as u64).to_le_bytes());
        h.update((s.image.height as u64).to_le_bytes());
        for v in &s.image.data {
            h.update(v.to_le_bytes());
        }
    }
    crate::hex(&h.finalize())
}

/// Where a prepared dataset comes from. Prepared directories store only
/// this spec and a fingerprint; the samples are rebuilt on load.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    Directory { layout: Layout, root: PathBuf, resolution: usize },
}

pub const SPEC_FILE: &str = "dataset.txt";
pub const IDENTITY_MAP_FILE: &str = "identities.tsv";
pub const STATS_FILE: &str = "stats.json";

impl DatasetSource {
    /// Parses `brands=4 ids=5 views=8 seed=7` (whitespace or comma
    /// separated); `resolution` is optional. `seed` falls back to
    /// `default_seed`.
    pub fn parse_synthetic(spec: &str, default_seed: Option<u64>) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for item in spec.split([' ', ',']).filter(|s| !s.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("synthetic spec item `{item}` is not key=value")))?;
            let v: u64 =
                v.parse().map_err(|_| Error::Usage(format!("synthetic spec `{k}` must be an integer, got `{v}`")))?;
            if !["brands", "ids", "views", "seed", "resolution"].contains(&k) {
                return Err(Error::Usage(format!("unknown synthetic spec key `{k}`")));
            }
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Usage(format!("synthetic spec needs `{k}=`")));
        let seed = match fields.get("seed") {
            Some(&s) => s,
            None => default_seed.ok_or_else(|| Error::Usage("synthetic spec needs `seed=` or --seed".into()))?,
        };
        let mut config =
            SyntheticConfig::new(get("brands")? as usize, get("ids")? as usize, get("views")? as usize, seed);
        if let Some(&r) = fields.get("resolution") {
            config.resolution = r as usize;
        }
        Ok(DatasetSource::Synthetic(config))
    }

    pub fn load(&self) -> Result<DatasetView> {
        match self {
            DatasetSource::Synthetic(c) => Ok(generate_synthetic_with(c)?),
            DatasetSource::Directory { layout, root, resolution } => ingest_directory(root, *layout, *resolution),
        }
    }

    /// Layout the data follows, which decides the default protocol.
    pub fn layout(&self) -> Layout {
        match self {
            DatasetSource::Synthetic(_) => Layout::Cars196,
            DatasetSource::Directory { layout, .. } => *layout,
        }
    }

    fn to_lines(&self) -> Vec<String> {
        match self {
            DatasetSource::Synthetic(c) => vec![
                "source=synthetic".into(),
                format!("brands={}", c.num_brands),
                format!("ids={}", c.ids_per_brand),
                format!("views={}", c.views_per_id),
                format!("seed={}", c.seed),
                format!("resolution={}", c.resolution),
            ],
            DatasetSource::Directory { layout, root, resolution } => {
                vec![format!("source={layout}"), format!("root={}", root.display()), format!("resolution={resolution}")]
            }
        }
    }
}

/// A prepared dataset directory: the spec plus the fingerprint it must match.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub source: DatasetSource,
    pub fingerprint: String,
}

impl PreparedDataset {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(SPEC_FILE);
        let mut text = self.source.to_lines().join("\n");
        text.push_str(&format!("\nfingerprint={}\n", self.fingerprint));
        fs::write(&path, text).at(&path)?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(SPEC_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) =
                line.split_once('=').ok_or_else(|| format_error(&path, format!("`{line}` is not key=value")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| format_error(&path, format!("missing `{k}`")));
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| format_error(&path, format!("`{k}` is not an integer")))
        };
        let source = match get("source")?.as_str() {
            "synthetic" => {
                let mut c = SyntheticConfig::new(
                    num("brands")? as usize,
                    num("ids")? as usize,
                    num("views")? as usize,
                    num("seed")?,
                );
                c.resolution = num("resolution")? as usize;
                DatasetSource::Synthetic(c)
            }
            other => DatasetSource::Directory {
                layout: Layout::parse(other).ok_or_else(|| format_error(&path, format!("unknown source `{other}`")))?,
                root: PathBuf::from(get("root")?),
                resolution: num("resolution")? as usize,
            },
        };
        Ok(Self { source, fingerprint: get("fingerprint")? })
    }

    /// Rebuilds the samples and checks them against the stored fingerprint.
    pub fn load(dir: &Path) -> Result<(Self, DatasetView)> {
        let prepared = Self::read(dir)?;
        let view = prepared.source.load()?;
        let actual = fingerprint(&view);
        if actual != prepared.fingerprint {
            return Err(Error::Ingest(format!(
                "dataset in {} changed since it was prepared (fingerprint {actual}, expected {})",
                dir.display(),
                prepared.fingerprint
            )));
        }
        Ok((prepared, view))
    }
}

/// Sidecar mapping contiguous identity ids back to raw labels.
pub fn write_identity_map(view: &DatasetView, path: &Path) -> Result<()> {
    let mut text = String::from("identity_id\tlabel\n");
    for (i, label) in view.identity_labels().iter().enumerate() {
        text.push_str(&format!("{i}\t{label}\n"));
    }
    fs::write(path, text).at(path)
}

pub fn stats(view: &DatasetView) -> serde_json::Value {
    json!({
        "samples": view.len(),
        "identities": view.num_identities(),
        "train_identities": view.num_train_identities(),
        "test_identities": view.num_test_identities(),
        "train_samples": view.count(Split::Train),
        "query_samples": view.count(Split::Query),
        "gallery_samples": view.count(Split::Gallery),
        "attribute_classes": view.num_attribute_classes(),
        "image_size": [view.image_size().0, view.image_size().1],
    })
}

fn save_png(image: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, image.width as u32, image.height as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

/// Writes `view` in the Cars196 layout as PNG files. Train samples go to
/// `train/`, query and gallery samples to `test/`; one directory per raw
/// identity label.
pub fn export_cars196(view: &DatasetView, root: &Path) -> Result<usize> {
    let mut counters: HashMap<u32, usize> = HashMap::new();
    for s in view.samples() {
        let split = if s.split == Split::Train { "train" } else { "test" };
        let label = &view.identity_labels()[s.identity_id as usize];
        let dir = root.join(split).join(label);
        fs::create_dir_all(&dir).at(&dir)?;
        let n = counters.entry(s.identity_id).or_default();
        save_png(&s.image, &dir.join(format!("{label}_{n:04}.png")))?;
        *n += 1;
    }
    Ok(view.len())
}
