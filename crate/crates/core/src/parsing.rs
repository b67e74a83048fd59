//! Face-part label maps and the binary masks derived from them. A parsing
//! adapter produces labels from a photo; masks for the regional
//! discriminators and crop boxes for part-level losses are pure functions
//! of those labels.

use crate::error::{Error, Result};
use crate::image::Rgb01;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Background,
    Skin,
    LeftEye,
    RightEye,
    Nose,
    Lips,
    Hair,
    Other,
}

impl Part {
    pub const ALL: [Part; 8] = [
        Part::Background,
        Part::Skin,
        Part::LeftEye,
        Part::RightEye,
        Part::Nose,
        Part::Lips,
        Part::Hair,
        Part::Other,
    ];

    pub fn code(self) -> u8 {
        match self {
            Part::Background => 0,
            Part::Skin => 1,
            Part::LeftEye => 2,
            Part::RightEye => 3,
            Part::Nose => 4,
            Part::Lips => 5,
            Part::Hair => 6,
            Part::Other => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Background => "background",
            Part::Skin => "skin",
            Part::LeftEye => "left-eye",
            Part::RightEye => "right-eye",
            Part::Nose => "nose",
            Part::Lips => "lips",
            Part::Hair => "hair",
            Part::Other => "other",
        }
    }

    pub fn from_name(name: &str) -> Option<Part> {
        Part::ALL.into_iter().find(|p| p.name() == name)
    }
}

/// Per-pixel part labels over a square frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PartLabelMap {
    pub labels: Array2<u8>,
}

impl PartLabelMap {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if labels.nrows() != labels.ncols() {
            return Err(Error::shape(format!(
                "label map must be square, got {}x{}",
                labels.nrows(),
                labels.ncols()
            )));
        }
        if labels.iter().any(|&v| v as usize >= Part::ALL.len()) {
            return Err(Error::data("label map contains out-of-palette codes"));
        }
        Ok(PartLabelMap { labels })
    }

    pub fn resolution(&self) -> usize {
        self.labels.nrows()
    }

    pub fn palette() -> &'static [Part; 8] {
        &Part::ALL
    }

    /// Binary mask of pixels carrying any of the given parts.
    pub fn mask_of(&self, parts: &[Part]) -> Array2<f64> {
        let codes: Vec<u8> = parts.iter().map(|p| p.code()).collect();
        self.labels
            .map(|&v| if codes.contains(&v) { 1.0 } else { 0.0 })
    }
}

/// Maps a photo to part labels (a pretrained segmenter at full scale).
pub trait FaceParser: Send + Sync {
    fn name(&self) -> &str;
    fn parse(&self, image: &Rgb01) -> Result<PartLabelMap>;
}

/// Fixed geometric layout, a deterministic function of resolution alone:
/// a centered face disc of radius 3r/8 (skin), hair in the disc's top
/// (y < 3r/8), two eye discs of radius max(r/16, 1) at y = 7r/16 and
/// x = 3r/8, 5r/8, a nose block at rows [r/2, r/2 + max(r/16, 1)) and
/// cols [15r/32, 17r/32), a lip band at rows [5r/8, 5r/8 + max(r/16, 1))
/// and cols [3r/8, 5r/8). Background outside the disc.
pub fn stub_layout(res: usize) -> PartLabelMap {
    let r = res as i64;
    let c = r / 2;
    let radius = 3 * r / 8;
    let eye_r = (r / 16).max(1);
    let eye_y = 7 * r / 16;
    let eye_lx = 3 * r / 8;
    let eye_rx = 5 * r / 8;
    let block_h = (r / 16).max(1);
    let mut labels = Array2::from_elem((res, res), Part::Background.code());
    for y in 0..r {
        for x in 0..r {
            let inside = (y - c) * (y - c) + (x - c) * (x - c) <= radius * radius;
            if !inside {
                continue;
            }
            let mut label = Part::Skin;
            if y < 3 * r / 8 {
                label = Part::Hair;
            }
            if (y - eye_y) * (y - eye_y) + (x - eye_lx) * (x - eye_lx) <= eye_r * eye_r
                || (y - eye_y) * (y - eye_y) + (x - eye_rx) * (x - eye_rx) <= eye_r * eye_r
            {
                label = if x < c { Part::LeftEye } else { Part::RightEye };
            }
            if (r / 2..r / 2 + block_h).contains(&y) && (15 * r / 32..17 * r / 32).contains(&x) {
                label = Part::Nose;
            }
            if (5 * r / 8..5 * r / 8 + block_h).contains(&y) && (3 * r / 8..5 * r / 8).contains(&x)
            {
                label = Part::Lips;
            }
            labels[[y as usize, x as usize]] = label.code();
        }
    }
    PartLabelMap { labels }
}

pub enum StubMode {
    Layout,
    AllBackground,
}

pub struct StubParser {
    pub mode: StubMode,
}

impl FaceParser for StubParser {
    fn name(&self) -> &str {
        match self.mode {
            StubMode::Layout => "stub:layout",
            StubMode::AllBackground => "stub:all-background",
        }
    }
    fn parse(&self, image: &Rgb01) -> Result<PartLabelMap> {
        let res = image.shape()[1];
        Ok(match self.mode {
            StubMode::Layout => stub_layout(res),
            StubMode::AllBackground => PartLabelMap {
                labels: Array2::from_elem((res, res), Part::Background.code()),
            },
        })
    }
}

pub struct UnreachableParser {
    pub endpoint: String,
}

impl FaceParser for UnreachableParser {
    fn name(&self) -> &str {
        "unreachable"
    }
    fn parse(&self, _image: &Rgb01) -> Result<PartLabelMap> {
        Err(Error::adapter(format!(
            "parsing adapter endpoint {:?} is unreachable",
            self.endpoint
        )))
    }
}

/// Run a parsing adapter and sanity-check its output against the photo.
pub fn parse_face(image: &Rgb01, parser: &dyn FaceParser) -> Result<PartLabelMap> {
    let labels = parser.parse(image)?;
    if labels.resolution() != image.shape()[1] || image.shape()[1] != image.shape()[2] {
        return Err(Error::shape(format!(
            "parser returned {}px labels for a {}x{} photo",
            labels.resolution(),
            image.shape()[1],
            image.shape()[2]
        )));
    }
    PartLabelMap::new(labels.labels)
}

/// Inclusive pixel box, already clipped to the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

/// Padded bounding box of the union of `parts`, or None when absent.
pub fn part_box(labels: &PartLabelMap, parts: &[Part], pad: usize) -> Option<CropBox> {
    let codes: Vec<u8> = parts.iter().map(|p| p.code()).collect();
    let res = labels.resolution();
    let (mut y_min, mut y_max, mut x_min, mut x_max) = (res, 0usize, res, 0usize);
    let mut found = false;
    for ((y, x), &v) in labels.labels.indexed_iter() {
        if codes.contains(&v) {
            found = true;
            y_min = y_min.min(y);
            y_max = y_max.max(y);
            x_min = x_min.min(x);
            x_max = x_max.max(x);
        }
    }
    if !found {
        return None;
    }
    let y0 = y_min.saturating_sub(pad);
    let x0 = x_min.saturating_sub(pad);
    let y1 = (y_max + pad).min(res - 1);
    let x1 = (x_max + pad).min(res - 1);
    Some(CropBox {
        y0,
        x0,
        h: y1 - y0 + 1,
        w: x1 - x0 + 1,
    })
}

/// Crop an image to a part's padded bounding box. Ok(None) marks an absent
/// part; an unknown part name is a configuration error.
pub fn part_crop(
    image: &Rgb01,
    labels: &PartLabelMap,
    part: &str,
    pad: usize,
) -> Result<Option<Array3<f64>>> {
    let p = Part::from_name(part)
        .ok_or_else(|| Error::config(format!("unknown part name {part:?}")))?;
    if image.shape()[1] != labels.resolution() || image.shape()[2] != labels.resolution() {
        return Err(Error::shape(format!(
            "image {:?} does not match {}px labels",
            image.shape(),
            labels.resolution()
        )));
    }
    Ok(part_box(labels, &[p], pad).map(|b| {
        image
            .slice(ndarray::s![.., b.y0..b.y0 + b.h, b.x0..b.x0 + b.w])
            .to_owned()
    }))
}

/// Named group of parts. Used both for discriminator regions and for the
/// part list of the perceptual loss. An empty part list means the whole
/// frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartGroup {
    pub name: String,
    pub parts: Vec<String>,
}

impl PartGroup {
    pub fn new(name: &str, parts: &[&str]) -> Self {
        PartGroup {
            name: name.into(),
            parts: parts.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn resolve(&self) -> Result<Vec<Part>> {
        self.parts
            .iter()
            .map(|n| {
                Part::from_name(n)
                    .ok_or_else(|| Error::config(format!("region {:?}: unknown part {n:?}", self.name)))
            })
            .collect()
    }
}

/// The five regional discriminator domains.
pub fn default_regions() -> Vec<PartGroup> {
    vec![
        PartGroup::new("full", &[]),
        PartGroup::new("hair", &["hair"]),
        PartGroup::new("eyes", &["left-eye", "right-eye"]),
        PartGroup::new("nose-lips", &["nose", "lips"]),
        PartGroup::new("skin-background", &["skin", "background"]),
    ]
}

/// Part list for the part-level perceptual term.
pub fn default_perceptual_parts() -> Vec<PartGroup> {
    vec![
        PartGroup::new("eyes", &["left-eye", "right-eye"]),
        PartGroup::new("nose", &["nose"]),
        PartGroup::new("lips", &["lips"]),
    ]
}

/// Ordered named binary masks over one frame.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub region_names: Vec<String>,
    pub masks: Vec<Array2<f64>>,
}

impl MaskSet {
    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.region_names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.masks[i])
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.region_names.iter().zip(self.masks.iter())
    }
}

/// One binary mask per configured region. A region whose parts are absent
/// still yields its (all-zero) mask.
pub fn discriminator_masks(labels: &PartLabelMap, regions: &[PartGroup]) -> Result<MaskSet> {
    let res = labels.resolution();
    let mut region_names = Vec::with_capacity(regions.len());
    let mut masks = Vec::with_capacity(regions.len());
    for region in regions {
        let mask = if region.parts.is_empty() {
            Array2::from_elem((res, res), 1.0)
        } else {
            labels.mask_of(&region.resolve()?)
        };
        region_names.push(region.name.clone());
        masks.push(mask);
    }
    Ok(MaskSet {
        region_names,
        masks,
    })
}

/// Background / foreground / full masks for domain-level training.
/// Background and foreground partition the frame exactly.
pub fn domain_masks_fgbg(labels: &PartLabelMap) -> MaskSet {
    let bg = labels.mask_of(&[Part::Background]);
    let fg = bg.map(|&v| 1.0 - v);
    let res = labels.resolution();
    MaskSet {
        region_names: vec!["background".into(), "foreground".into(), "full".into()],
        masks: vec![bg, fg, Array2::from_elem((res, res), 1.0)],
    }
}
