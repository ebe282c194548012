//! Ground truth, predictions, dataset ingestion and prediction-to-object matching.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};

/// Default reporting floor for detections entering matching and failure analysis.
pub const DEFAULT_CONF_FLOOR: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub class_name: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub confidence: f64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub image_id: String,
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
}

impl DatasetItem {
    pub fn image_size(&self) -> (u32, u32) {
        self.image.dimensions()
    }
}

/// Orders detections by `(class_id, -confidence, x_min)`, then the remaining
/// coordinates, so downstream results never depend on detector output order.
pub fn canonical_sort(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        a.class_id
            .cmp(&b.class_id)
            .then(b.confidence.total_cmp(&a.confidence))
            .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
            .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
            .then(a.bbox.x_max.total_cmp(&b.bbox.x_max))
            .then(a.bbox.y_max.total_cmp(&b.bbox.y_max))
    });
}

/// Keeps detections with `confidence >= floor`, canonically sorted.
pub fn apply_conf_floor(dets: &[Detection], floor: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = dets
        .iter()
        .copied()
        .filter(|d| d.confidence >= floor)
        .collect();
    canonical_sort(&mut kept);
    kept
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestMatch {
    pub index: usize,
    pub iou: f64,
    pub confidence: f64,
}

/// Best same-class prediction for one object: maximal IoU, then higher
/// confidence, then lower index. Predictions with zero overlap never match.
pub fn best_same_class_match(gt: &Annotation, preds: &[Detection]) -> Option<BestMatch> {
    let mut best: Option<BestMatch> = None;
    for (index, p) in preds.iter().enumerate() {
        if p.class_id != gt.class_id {
            continue;
        }
        let v = iou(&gt.bbox, &p.bbox);
        if v <= 0.0 {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => v > b.iou || (v == b.iou && p.confidence > b.confidence),
        };
        if better {
            best = Some(BestMatch {
                index,
                iou: v,
                confidence: p.confidence,
            });
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub same_class_only: bool,
    /// Pairs below this IoU are never assigned. Zero-overlap pairs are always excluded.
    pub min_iou: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            same_class_only: false,
            min_iou: 0.0,
        }
    }
}

/// One-to-one assignment of predictions to ground-truth objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Per ground-truth object: `(prediction index, IoU)` when matched.
    pub assigned: Vec<Option<(usize, f64)>>,
    /// Per prediction: whether it was consumed by some object.
    pub used: Vec<bool>,
}

impl Matching {
    pub fn matched_count(&self) -> usize {
        self.assigned.iter().flatten().count()
    }
}

/// Components larger than this many candidate assignments use greedy matching.
const EXACT_SEARCH_LIMIT: u64 = 500_000;
const IOU_TIE_EPS: f64 = 1e-9;

/// Score of a partial assignment, compared lexicographically (larger is better).
#[derive(Debug, Clone, Copy, Default)]
struct AssignmentScore {
    total_iou: f64,
    same_class: usize,
    total_conf: f64,
}

impl AssignmentScore {
    fn better_than(&self, other: &AssignmentScore) -> bool {
        if (self.total_iou - other.total_iou).abs() > IOU_TIE_EPS {
            return self.total_iou > other.total_iou;
        }
        if self.same_class != other.same_class {
            return self.same_class > other.same_class;
        }
        self.total_conf > other.total_conf + IOU_TIE_EPS
    }
}

struct Edge {
    pred: usize,
    iou: f64,
    same_class: bool,
    conf: f64,
}

/// Maximum-total-IoU one-to-one matching.
///
/// Ties are resolved by the number of same-class pairs, then total confidence,
/// then the lexicographically smallest choice of prediction indices in
/// ground-truth order. The bipartite overlap graph is split into connected
/// components which are solved exactly by enumeration.
pub fn match_one_to_one(gts: &[Annotation], preds: &[Detection], params: MatchParams) -> Matching {
    let edges: Vec<Vec<Edge>> = gts
        .iter()
        .map(|g| {
            preds
                .iter()
                .enumerate()
                .filter_map(|(j, p)| {
                    let same = p.class_id == g.class_id;
                    if params.same_class_only && !same {
                        return None;
                    }
                    let v = iou(&g.bbox, &p.bbox);
                    (v > 0.0 && v >= params.min_iou).then_some(Edge {
                        pred: j,
                        iou: v,
                        same_class: same,
                        conf: p.confidence,
                    })
                })
                .collect()
        })
        .collect();

    let mut assigned = vec![None; gts.len()];
    let mut used = vec![false; preds.len()];
    for component in components(&edges, preds.len()) {
        let choice = solve_component(&component, &edges, preds.len());
        for (&g, c) in component.iter().zip(choice) {
            if let Some(e) = c {
                assigned[g] = Some((edges[g][e].pred, edges[g][e].iou));
                used[edges[g][e].pred] = true;
            }
        }
    }
    Matching { assigned, used }
}

/// Ground-truth indices grouped by connected component, each sorted ascending.
fn components(edges: &[Vec<Edge>], n_preds: usize) -> Vec<Vec<usize>> {
    let n = edges.len() + n_preds;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (g, es) in edges.iter().enumerate() {
        for e in es {
            let (a, b) = (find(&mut parent, g), find(&mut parent, edges.len() + e.pred));
            if a != b {
                parent[a] = b;
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (g, es) in edges.iter().enumerate() {
        if es.is_empty() {
            continue;
        }
        let root = find(&mut parent, g);
        groups.entry(root).or_default().push(g);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|c| c[0]);
    out
}

/// Returns, per ground truth of the component, the chosen edge index.
fn solve_component(component: &[usize], edges: &[Vec<Edge>], n_preds: usize) -> Vec<Option<usize>> {
    let work: Option<u64> = component
        .iter()
        .map(|&g| edges[g].len() as u64 + 1)
        .try_fold(1u64, |acc, k| acc.checked_mul(k).filter(|v| *v <= EXACT_SEARCH_LIMIT));
    if work.is_none() {
        log::warn!(
            "matching component with {} objects too large for exact search; using greedy",
            component.len()
        );
        return greedy_component(component, edges, n_preds);
    }

    struct Search<'a> {
        component: &'a [usize],
        edges: &'a [Vec<Edge>],
        used: Vec<bool>,
        current: Vec<Option<usize>>,
        best: Vec<Option<usize>>,
        best_score: Option<AssignmentScore>,
    }

    impl Search<'_> {
        fn run(&mut self, depth: usize, score: AssignmentScore) {
            if depth == self.component.len() {
                if self.best_score.is_none_or(|b| score.better_than(&b)) {
                    self.best_score = Some(score);
                    self.best.clone_from(&self.current);
                }
                return;
            }
            let g = self.component[depth];
            let mut order: Vec<usize> = (0..self.edges[g].len()).collect();
            order.sort_by_key(|&e| self.edges[g][e].pred);
            for e in order {
                let edge = &self.edges[g][e];
                if self.used[edge.pred] {
                    continue;
                }
                self.used[edge.pred] = true;
                self.current[depth] = Some(e);
                let next = AssignmentScore {
                    total_iou: score.total_iou + edge.iou,
                    same_class: score.same_class + edge.same_class as usize,
                    total_conf: score.total_conf + edge.conf,
                };
                self.run(depth + 1, next);
                self.used[edge.pred] = false;
            }
            self.current[depth] = None;
            self.run(depth + 1, score);
        }
    }

    let mut s = Search {
        component,
        edges,
        used: vec![false; n_preds],
        current: vec![None; component.len()],
        best: vec![None; component.len()],
        best_score: None,
    };
    s.run(0, AssignmentScore::default());
    s.best
}

/// Repeatedly takes the highest-IoU remaining pair.
fn greedy_component(component: &[usize], edges: &[Vec<Edge>], n_preds: usize) -> Vec<Option<usize>> {
    let mut pairs: Vec<(usize, usize)> = component
        .iter()
        .enumerate()
        .flat_map(|(k, &g)| (0..edges[g].len()).map(move |e| (k, e)))
        .collect();
    pairs.sort_by(|&(ka, ea), &(kb, eb)| {
        let a = &edges[component[ka]][ea];
        let b = &edges[component[kb]][eb];
        b.iou
            .total_cmp(&a.iou)
            .then(b.same_class.cmp(&a.same_class))
            .then(b.conf.total_cmp(&a.conf))
            .then(ka.cmp(&kb))
            .then(a.pred.cmp(&b.pred))
    });
    let mut used = vec![false; n_preds];
    let mut out = vec![None; component.len()];
    for (k, e) in pairs {
        let p = edges[component[k]][e].pred;
        if out[k].is_none() && !used[p] {
            out[k] = Some(e);
            used[p] = true;
        }
    }
    out
}

/// A label line `class_id cx cy w h` with normalized center and size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelLine {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl LabelLine {
    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(format!("expected 5 fields, found {}", fields.len()));
        }
        let class_id = fields[0]
            .parse::<usize>()
            .map_err(|_| format!("bad class id `{}`", fields[0]))?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("bad coordinate `{f}`"))?;
        }
        Ok(LabelLine {
            class_id,
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        })
    }

    pub fn from_box(class_id: usize, b: &BoundingBox, (w, h): (u32, u32)) -> Self {
        let (w, h) = (w as f64, h as f64);
        LabelLine {
            class_id,
            cx: 0.5 * (b.x_min + b.x_max) / w,
            cy: 0.5 * (b.y_min + b.y_max) / h,
            w: b.width() / w,
            h: b.height() / h,
        }
    }

    /// Pixel-coordinate box, clipped to the image.
    pub fn to_box(&self, (w, h): (u32, u32)) -> BoundingBox {
        let (w, h) = (w as f64, h as f64);
        BoundingBox {
            x_min: ((self.cx - self.w / 2.0) * w).clamp(0.0, w),
            y_min: ((self.cy - self.h / 2.0) * h).clamp(0.0, h),
            x_max: ((self.cx + self.w / 2.0) * w).clamp(0.0, w),
            y_max: ((self.cy + self.h / 2.0) * h).clamp(0.0, h),
        }
    }

    pub fn format(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.6}",
            self.class_id, self.cx, self.cy, self.w, self.h
        )
    }
}

pub fn parse_label_file(
    path: &Path,
    text: &str,
    classes: &[String],
    image_size: (u32, u32),
) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::LabelParse {
            path: path.to_path_buf(),
            line: k + 1,
            message,
        };
        let l = LabelLine::parse(line).map_err(err)?;
        let class_name = classes
            .get(l.class_id)
            .ok_or_else(|| err(format!("class id {} outside class list", l.class_id)))?
            .clone();
        out.push(Annotation {
            class_id: l.class_id,
            class_name,
            bbox: l.to_box(image_size),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadWarning {
    pub image_id: String,
    pub message: String,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Loads every PNG/JPEG image in `images_dir` with its label file
/// `<labels_dir>/<stem>.txt`. Items are sorted by image id.
pub fn load_dataset(
    images_dir: &Path,
    labels_dir: &Path,
    classes: &[String],
) -> Result<(Vec<DatasetItem>, Vec<LoadWarning>)> {
    let mut paths: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(images_dir).map_err(|e| Error::io(images_dir, e))? {
        let path = entry.map_err(|e| Error::io(images_dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            paths.push((stem.to_string(), path.clone()));
        }
    }
    paths.sort();

    let mut items = Vec::with_capacity(paths.len());
    let mut warnings = Vec::new();
    for (image_id, path) in paths {
        let image = image::open(&path)?.to_rgb8();
        let label_path = labels_dir.join(format!("{image_id}.txt"));
        let annotations = match fs::read_to_string(&label_path) {
            Ok(text) => parse_label_file(&label_path, &text, classes, image.dimensions())?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                warnings.push(LoadWarning {
                    image_id: image_id.clone(),
                    message: format!("missing label file {}", label_path.display()),
                });
                Vec::new()
            }
            Err(e) => return Err(Error::io(&label_path, e)),
        };
        items.push(DatasetItem {
            image_id,
            image,
            annotations,
        });
    }
    Ok((items, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn gt(class_id: usize, b: BoundingBox) -> Annotation {
        Annotation {
            class_id,
            class_name: format!("c{class_id}"),
            bbox: b,
        }
    }

    fn det(class_id: usize, confidence: f64, b: BoundingBox) -> Detection {
        Detection {
            class_id,
            confidence,
            bbox: b,
        }
    }

    #[test]
    fn best_match_fixtures() {
        let g = gt(0, bb(0.0, 0.0, 10.0, 10.0));
        assert_eq!(best_same_class_match(&g, &[]), None);
        let m = best_same_class_match(&g, &[det(0, 0.7, g.bbox)]).unwrap();
        assert_eq!((m.index, m.iou), (0, 1.0));

        // IoU 0.6 vs 0.3 (widths 6/10 and 3/10 of the gt, same height)
        let preds = [
            det(0, 0.9, bb(0.0, 0.0, 3.0, 10.0)),
            det(0, 0.5, bb(0.0, 0.0, 6.0, 10.0)),
            det(1, 0.99, g.bbox),
        ];
        let m = best_same_class_match(&g, &preds).unwrap();
        assert_eq!(m.index, 1);
        assert!((m.iou - 0.6).abs() < 1e-12);
    }

    #[test]
    fn best_match_tie_prefers_confidence_then_index() {
        let g = gt(0, bb(0.0, 0.0, 10.0, 10.0));
        let preds = [det(0, 0.5, g.bbox), det(0, 0.8, g.bbox), det(0, 0.8, g.bbox)];
        assert_eq!(best_same_class_match(&g, &preds).unwrap().index, 1);
    }

    #[test]
    fn matching_fixtures() {
        let g = gt(0, bb(0.0, 0.0, 10.0, 10.0));
        let m = match_one_to_one(std::slice::from_ref(&g), &[det(0, 0.9, g.bbox)], MatchParams::default());
        assert_eq!(m.assigned, vec![Some((0, 1.0))]);

        // one prediction overlapping two objects goes to the higher-IoU one
        let gts = [gt(0, bb(0.0, 0.0, 10.0, 10.0)), gt(0, bb(6.0, 0.0, 16.0, 10.0))];
        let p = det(0, 0.9, bb(1.0, 0.0, 11.0, 10.0));
        let m = match_one_to_one(&gts, &[p], MatchParams::default());
        assert!(m.assigned[0].is_some());
        assert!(m.assigned[1].is_none());

        let m = match_one_to_one(&gts, &[], MatchParams::default());
        assert_eq!(m.assigned, vec![None, None]);
    }

    #[test]
    fn matching_beats_greedy_on_crossed_pairs() {
        // greedy takes the single best pair first; crossing the pairs gives more total IoU
        let gts = [gt(0, bb(0.0, 0.0, 10.0, 10.0)), gt(0, bb(1.5, 0.0, 11.5, 10.0))];
        let preds = [det(0, 0.9, bb(0.5, 0.0, 10.5, 10.0)), det(0, 0.9, bb(-2.0, 0.0, 8.0, 10.0))];
        let m = match_one_to_one(&gts, &preds, MatchParams::default());
        assert_eq!(m.assigned[0].map(|a| a.0), Some(1));
        assert_eq!(m.assigned[1].map(|a| a.0), Some(0));
        let greedy = greedy_component(
            &[0, 1],
            &gts.iter()
                .map(|g| {
                    preds
                        .iter()
                        .enumerate()
                        .map(|(j, p)| Edge {
                            pred: j,
                            iou: iou(&g.bbox, &p.bbox),
                            same_class: true,
                            conf: p.confidence,
                        })
                        .collect()
                })
                .collect::<Vec<_>>(),
            2,
        );
        assert_eq!(greedy[0], Some(0));
    }

    #[test]
    fn same_class_only_excludes_other_classes() {
        let g = gt(0, bb(0.0, 0.0, 10.0, 10.0));
        let params = MatchParams {
            same_class_only: true,
            min_iou: 0.0,
        };
        let m = match_one_to_one(std::slice::from_ref(&g), &[det(1, 0.9, g.bbox)], params);
        assert_eq!(m.assigned, vec![None]);
    }

    #[test]
    fn label_fixtures() {
        let l = LabelLine::parse("2 0.5 0.5 0.2 0.2").unwrap();
        assert_eq!(l.class_id, 2);
        let b = l.to_box((100, 100));
        for (v, e) in [b.x_min, b.y_min, b.x_max, b.y_max].iter().zip([40.0, 40.0, 60.0, 60.0]) {
            assert!((v - e).abs() < 1e-9);
        }
        assert!(LabelLine::parse("2 0.5 0.5 0.2").is_err());
        assert!(LabelLine::parse("x 0.5 0.5 0.2 0.2").is_err());
    }

    #[test]
    fn malformed_label_reports_line() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let text = "0 0.5 0.5 0.1 0.1\n1 0.5 0.5 0.1\n";
        match parse_label_file(Path::new("img.txt"), text, &classes, (10, 10)) {
            Err(Error::LabelParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_label_file(Path::new("img.txt"), "", &classes, (10, 10))
            .unwrap()
            .is_empty());
        assert!(parse_label_file(Path::new("img.txt"), "5 0.5 0.5 0.1 0.1", &classes, (10, 10)).is_err());
    }

    #[test]
    fn conf_floor_filters_and_sorts() {
        let b = bb(0.0, 0.0, 1.0, 1.0);
        let dets = [det(1, 0.9, b), det(0, 0.2, b), det(0, 0.3, b), det(0, 0.6, b)];
        let kept = apply_conf_floor(&dets, 0.25);
        let confs: Vec<f64> = kept.iter().map(|d| d.confidence).collect();
        assert_eq!(confs, vec![0.6, 0.3, 0.9]);
    }

    proptest! {
        #[test]
        fn label_round_trip(
            cx in 0.1..0.9f64, cy in 0.1..0.9f64,
            w in 0.0..0.2f64, h in 0.0..0.2f64,
        ) {
            let size = (640, 480);
            let line = LabelLine { class_id: 1, cx, cy, w, h };
            let back = LabelLine::from_box(1, &line.to_box(size), size);
            for (u, v) in [cx, cy, w, h].iter().zip([back.cx, back.cy, back.w, back.h]) {
                prop_assert!((u - v).abs() < 1e-6);
            }
            let reparsed = LabelLine::parse(&line.format()).unwrap();
            for (u, v) in [cx, cy, w, h].iter().zip([reparsed.cx, reparsed.cy, reparsed.w, reparsed.h]) {
                prop_assert!((u - v).abs() <= 5e-7 + 1e-12);
            }
        }
    }
}
