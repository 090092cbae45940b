//! Dataset representation and the JSON file formats for datasets,
//! detections and mined pseudo annotations.
//!
//! Boxes are stored as `[x1, y1, x2, y2]`. Simulator-only truth lives in
//! [`ImageRecord::hidden_gt`]; training code works on [`TrainImage`]
//! projections, which do not carry it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub type CategoryId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Original,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub category: CategoryId,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Annotation {
    pub fn original(bbox: BBox, category: CategoryId) -> Self {
        Self {
            bbox,
            category,
            origin: Origin::Original,
            score: None,
        }
    }

    pub fn pseudo(bbox: BBox, category: CategoryId, score: f64) -> Self {
        Self {
            bbox,
            category,
            origin: Origin::Pseudo,
            score: Some(score),
        }
    }

    fn check(&self, n_categories: usize) -> std::result::Result<(), String> {
        if self.category as usize >= n_categories {
            return Err(format!(
                "category {} out of range (have {n_categories} categories)",
                self.category
            ));
        }
        match (self.origin, self.score) {
            (Origin::Original, None) => Ok(()),
            (Origin::Original, Some(_)) => Err("original annotation carries a score".into()),
            (Origin::Pseudo, Some(s)) if s > 0.0 && s <= 1.0 => Ok(()),
            (Origin::Pseudo, Some(s)) => Err(format!("pseudo annotation score {s} outside (0, 1]")),
            (Origin::Pseudo, None) => Err("pseudo annotation without a score".into()),
        }
    }
}

/// A scored, categorized box produced by a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: CategoryId,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    TargetTrain,
    TargetTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub domain: Domain,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub labels: BTreeSet<CategoryId>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    #[serde(default)]
    pub hidden_gt: Vec<Annotation>,
}

/// The training-visible part of an [`ImageRecord`].
#[derive(Debug, Clone, Copy)]
pub struct TrainImage<'a> {
    pub id: &'a str,
    pub domain: Domain,
    pub width: f64,
    pub height: f64,
    pub labels: &'a BTreeSet<CategoryId>,
    pub annotations: &'a [Annotation],
}

impl TrainImage<'_> {
    /// Boxes of annotations with `origin = original`.
    pub fn original_boxes(&self) -> Vec<BBox> {
        self.annotations
            .iter()
            .filter(|a| a.origin == Origin::Original)
            .map(|a| a.bbox)
            .collect()
    }
}

impl ImageRecord {
    pub fn view(&self) -> TrainImage<'_> {
        TrainImage {
            id: &self.id,
            domain: self.domain,
            width: self.width,
            height: self.height,
            labels: &self.labels,
            annotations: &self.annotations,
        }
    }

    fn validate(&self, n_categories: usize, split: Split) -> Result<()> {
        let fail = |reason: String| Error::InvalidImage {
            image_id: self.id.clone(),
            reason,
        };
        if !(self.width.is_finite() && self.width > 0.0 && self.height.is_finite() && self.height > 0.0)
        {
            return Err(fail(format!(
                "non-positive size {}x{}",
                self.width, self.height
            )));
        }
        for (kind, list) in [("annotation", &self.annotations), ("hidden_gt", &self.hidden_gt)] {
            for (i, a) in list.iter().enumerate() {
                a.check(n_categories).map_err(|r| fail(format!("{kind} {i}: {r}")))?;
                if !a.bbox.within(self.width, self.height) {
                    return Err(fail(format!(
                        "{kind} {i}: box {:?} outside image bounds",
                        a.bbox.to_array()
                    )));
                }
            }
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= n_categories) {
            return Err(fail(format!("label {l} out of range")));
        }
        if split == Split::TargetTrain && !self.hidden_gt.is_empty() {
            let truth: BTreeSet<CategoryId> = self.hidden_gt.iter().map(|a| a.category).collect();
            if truth != self.labels {
                return Err(fail(format!(
                    "labels {:?} disagree with hidden_gt categories {:?}",
                    self.labels, truth
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub categories: Vec<String>,
    pub split: Split,
    pub images: Vec<ImageRecord>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for img in &self.images {
            if !seen.insert(img.id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate image id `{}`", img.id)));
            }
            img.validate(self.categories.len(), self.split)?;
        }
        Ok(())
    }

    pub fn views(&self) -> Vec<TrainImage<'_>> {
        self.images.iter().map(ImageRecord::view).collect()
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Returns a copy whose annotations are the originals plus the mined
    /// boxes, which must all be pseudo annotations.
    pub fn augment(&self, mined: &BTreeMap<String, Vec<Annotation>>) -> Result<Dataset> {
        let mut out = self.clone();
        for (id, extra) in mined {
            let img = out
                .images
                .iter_mut()
                .find(|i| &i.id == id)
                .ok_or_else(|| Error::UnknownImage(id.clone()))?;
            for a in extra {
                if a.origin != Origin::Pseudo {
                    return Err(Error::InvalidImage {
                        image_id: id.clone(),
                        reason: "augment expects pseudo annotations".into(),
                    });
                }
                a.check(self.categories.len()).map_err(|reason| Error::InvalidImage {
                    image_id: id.clone(),
                    reason,
                })?;
            }
            img.annotations.extend(extra.iter().cloned());
        }
        Ok(out)
    }

    /// Keeps only images whose index passes `keep`.
    pub fn filter_images(&self, mut keep: impl FnMut(usize, &ImageRecord) -> bool) -> Dataset {
        Dataset {
            categories: self.categories.clone(),
            split: self.split,
            images: self
                .images
                .iter()
                .enumerate()
                .filter(|(i, img)| keep(*i, img))
                .map(|(_, img)| img.clone())
                .collect(),
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawDataset = serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    let mut images = Vec::with_capacity(raw.images.len());
    for (i, value) in raw.images.into_iter().enumerate() {
        let image_id = value
            .get("id")
            .and_then(|v| v.as_str())
            .map_or_else(|| format!("#{i}"), str::to_owned);
        let img: ImageRecord = serde_json::from_value(value).map_err(|e| Error::InvalidImage {
            image_id,
            reason: e.to_string(),
        })?;
        images.push(img);
    }
    let ds = Dataset {
        categories: raw.categories,
        split: raw.split,
        images,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Deserialize)]
struct RawDataset {
    categories: Vec<String>,
    split: Split,
    images: Vec<serde_json::Value>,
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_json(ds, path.as_ref())
}

/// One row of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub bbox: BBox,
    pub category: CategoryId,
    pub score: f64,
}

/// One row of a mined-annotation dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedRecord {
    pub image_id: String,
    pub bbox: BBox,
    pub category: CategoryId,
    pub score: f64,
    pub origin: Origin,
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<Detection>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<DetectionRecord> = serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for r in rows {
        if !(0.0..=1.0).contains(&r.score) {
            return Err(Error::InvalidImage {
                image_id: r.image_id,
                reason: format!("detection score {} outside [0, 1]", r.score),
            });
        }
        out.entry(r.image_id).or_default().push(Detection {
            bbox: r.bbox,
            category: r.category,
            score: r.score,
        });
    }
    Ok(out)
}

pub fn save_detections(dets: &BTreeMap<String, Vec<Detection>>, path: impl AsRef<Path>) -> Result<()> {
    write_json(&detection_records(dets), path.as_ref())
}

pub fn detection_records(dets: &BTreeMap<String, Vec<Detection>>) -> Vec<DetectionRecord> {
    dets.iter()
        .flat_map(|(id, ds)| {
            ds.iter().map(move |d| DetectionRecord {
                image_id: id.clone(),
                bbox: d.bbox,
                category: d.category,
                score: d.score,
            })
        })
        .collect()
}

pub fn mined_records(mined: &BTreeMap<String, Vec<Annotation>>) -> Vec<MinedRecord> {
    mined
        .iter()
        .flat_map(|(id, anns)| {
            anns.iter().map(move |a| MinedRecord {
                image_id: id.clone(),
                bbox: a.bbox,
                category: a.category,
                score: a.score.unwrap_or(0.0),
                origin: a.origin,
            })
        })
        .collect()
}

pub(crate) fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn sample() -> Dataset {
        Dataset {
            categories: vec!["a".into(), "b".into()],
            split: Split::SourceTrain,
            images: vec![
                ImageRecord {
                    id: "s0".into(),
                    domain: Domain::Source,
                    width: 100.0,
                    height: 80.0,
                    labels: BTreeSet::new(),
                    annotations: vec![Annotation::original(b(1.0, 2.0, 30.0, 40.0), 0)],
                    hidden_gt: vec![
                        Annotation::original(b(1.0, 2.0, 30.0, 40.0), 0),
                        Annotation::original(b(50.0, 10.0, 70.0, 60.0), 1),
                    ],
                },
                ImageRecord {
                    id: "s1".into(),
                    domain: Domain::Source,
                    width: 64.0,
                    height: 64.0,
                    labels: BTreeSet::new(),
                    annotations: vec![],
                    hidden_gt: vec![],
                },
            ],
        }
    }

    #[test]
    fn load_well_formed_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        let ds = sample();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.images.len(), 2);
        assert_eq!(back, ds);
    }

    #[test]
    fn degenerate_box_names_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let text = r#"{"categories":["a"],"split":"source_train","images":[
            {"id":"ok","domain":"source","width":10,"height":10,"labels":[],"annotations":[],"hidden_gt":[]},
            {"id":"broken","domain":"source","width":10,"height":10,"labels":[],
             "annotations":[{"bbox":[5,1,4,3],"category":0,"origin":"original"}],"hidden_gt":[]}]}"#;
        fs::write(&path, text).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("broken"), "{err}");
    }

    #[test]
    fn out_of_bounds_box_names_image() {
        let mut ds = sample();
        ds.images[1].annotations.push(Annotation::original(b(0.0, 0.0, 65.0, 10.0), 0));
        let err = ds.validate().unwrap_err();
        assert!(err.to_string().contains("s1"), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut ds = sample();
        ds.images[1].id = "s0".into();
        assert!(ds.validate().is_err());
    }

    #[test]
    fn pseudo_needs_score() {
        let mut ds = sample();
        ds.images[0].annotations.push(Annotation {
            bbox: b(0.0, 0.0, 1.0, 1.0),
            category: 1,
            origin: Origin::Pseudo,
            score: None,
        });
        assert!(ds.validate().is_err());
    }

    #[test]
    fn target_labels_must_match_hidden_gt() {
        let mut ds = sample();
        ds.split = Split::TargetTrain;
        for img in &mut ds.images {
            img.domain = Domain::Target;
            img.annotations.clear();
        }
        assert!(ds.validate().is_err());
        ds.images[0].labels = [0, 1].into();
        ds.validate().unwrap();
    }

    #[test]
    fn augment_empty_is_identity() {
        let ds = sample();
        assert_eq!(ds.augment(&BTreeMap::new()).unwrap(), ds);
    }

    #[test]
    fn augment_adds_one_pseudo() {
        let ds = sample();
        let mined = BTreeMap::from([(
            "s1".to_string(),
            vec![Annotation::pseudo(b(1.0, 1.0, 9.0, 9.0), 1, 0.9)],
        )]);
        let out = ds.augment(&mined).unwrap();
        assert_eq!(out.images[0], ds.images[0]);
        assert_eq!(out.images[1].annotations.len(), 1);
        assert_eq!(out.images[1].annotations[0].origin, Origin::Pseudo);
    }

    #[test]
    fn augment_rejects_unknown_id_and_original() {
        let ds = sample();
        let unknown = BTreeMap::from([(
            "nope".to_string(),
            vec![Annotation::pseudo(b(1.0, 1.0, 9.0, 9.0), 1, 0.9)],
        )]);
        assert!(matches!(ds.augment(&unknown), Err(Error::UnknownImage(_))));
        let original = BTreeMap::from([(
            "s1".to_string(),
            vec![Annotation::original(b(1.0, 1.0, 9.0, 9.0), 1)],
        )]);
        assert!(ds.augment(&original).is_err());
    }

    #[test]
    fn augment_twice_equals_merged() {
        let ds = sample();
        let m1 = BTreeMap::from([(
            "s0".to_string(),
            vec![Annotation::pseudo(b(60.0, 1.0, 90.0, 9.0), 1, 0.95)],
        )]);
        let m2 = BTreeMap::from([
            (
                "s1".to_string(),
                vec![Annotation::pseudo(b(1.0, 1.0, 9.0, 9.0), 1, 0.85)],
            ),
            (
                "s0".to_string(),
                vec![Annotation::pseudo(b(2.0, 50.0, 9.0, 79.0), 0, 0.81)],
            ),
        ]);
        let twice = ds.augment(&m1).unwrap().augment(&m2).unwrap();
        let mut merged = m1.clone();
        for (k, v) in &m2 {
            merged.entry(k.clone()).or_default().extend(v.iter().cloned());
        }
        let once = ds.augment(&merged).unwrap();
        // multiset equality of annotations per image
        for (a, b) in twice.images.iter().zip(&once.images) {
            let key = |x: &Annotation| format!("{:?}", x);
            let mut ka: Vec<String> = a.annotations.iter().map(key).collect();
            let mut kb: Vec<String> = b.annotations.iter().map(key).collect();
            ka.sort();
            kb.sort();
            assert_eq!(ka, kb);
        }
    }

    #[test]
    fn detections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.json");
        let dets = BTreeMap::from([(
            "s0".to_string(),
            vec![Detection {
                bbox: b(1.0, 1.0, 2.0, 2.0),
                category: 1,
                score: 0.25,
            }],
        )]);
        save_detections(&dets, &path).unwrap();
        assert_eq!(load_detections(&path).unwrap(), dets);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"image_id\""));
    }
}
