//! Black-box detectors: the contrast-threshold synthetic detector, its scene
//! renderer, and the newline-delimited JSON bridge client for external models.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{canonical_sort, Annotation, Detection};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::perturbation::seeded_rng;

/// Class names produced by the synthetic detector, indexed by class id.
pub const SYNTHETIC_CLASSES: [&str; 2] = ["screw", "noscrew"];

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("failed to launch bridge `{command}`: {message}")]
    Spawn { command: String, message: String },
    #[error("bridge transport failure: {0}")]
    Transport(String),
    #[error("bridge did not answer within {0:?}")]
    Timeout(Duration),
    #[error("protocol error: {message} (payload: {payload})")]
    Protocol { message: String, payload: String },
    #[error("bridge reported an error for request {id}: {message}")]
    Remote { id: String, message: String },
}

pub trait Detector: Send + Sync {
    fn detect(&self, image: &RgbImage) -> Result<Vec<Detection>, DetectorError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Synthetic,
    External,
}

/// A named detector plus its declared properties and a call counter.
pub struct DetectorHandle {
    pub name: String,
    pub kind: DetectorKind,
    pub deterministic: bool,
    pub concurrent: bool,
    inner: Arc<dyn Detector>,
    calls: AtomicU64,
}

impl std::fmt::Debug for DetectorHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DetectorHandle")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("calls", &self.calls())
            .finish()
    }
}

impl DetectorHandle {
    pub fn new(
        name: impl Into<String>,
        kind: DetectorKind,
        deterministic: bool,
        concurrent: bool,
        inner: Arc<dyn Detector>,
    ) -> Self {
        DetectorHandle {
            name: name.into(),
            kind,
            deterministic,
            concurrent,
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn synthetic(name: impl Into<String>, params: SyntheticParams) -> Self {
        Self::new(
            name,
            DetectorKind::Synthetic,
            true,
            true,
            Arc::new(SyntheticDetector { params }),
        )
    }

    /// Canonically sorted detections. Confidence filtering is left to the caller.
    pub fn detect(&self, image: &RgbImage) -> Result<Vec<Detection>, DetectorError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut dets = self.inner.detect(image)?;
        canonical_sort(&mut dets);
        Ok(dets)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub background: u8,
    /// Pixels whose gray level differs from the background by more than this are foreground.
    pub contrast_threshold: u8,
    pub min_area: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            background: 128,
            contrast_threshold: 40,
            min_area: 16,
        }
    }
}

pub struct SyntheticDetector {
    pub params: SyntheticParams,
}

impl Detector for SyntheticDetector {
    fn detect(&self, image: &RgbImage) -> Result<Vec<Detection>, DetectorError> {
        Ok(synthetic_detect(image, &self.params))
    }
}

/// Gray level `round((r + g + b) / 3)`.
pub fn gray_level(p: &Rgb<u8>) -> u8 {
    let sum = p.0[0] as u32 + p.0[1] as u32 + p.0[2] as u32;
    ((sum as f64) / 3.0).round() as u8
}

/// Thresholds gray-level contrast against the background and reports every
/// 4-connected foreground component of at least `min_area` pixels.
///
/// Dark components are class 0, bright ones class 1. The box spans the
/// component's extreme pixel coordinates and the confidence is the mean
/// absolute contrast over 128, capped at 1.
pub fn synthetic_detect(image: &RgbImage, params: &SyntheticParams) -> Vec<Detection> {
    let (w, h) = image.dimensions();
    let (w, h) = (w as usize, h as usize);
    let bg = params.background as i32;
    let gray: Vec<i32> = image.pixels().map(|p| gray_level(p) as i32).collect();
    let fg: Vec<bool> = gray
        .iter()
        .map(|&g| (g - bg).abs() > params.contrast_threshold as i32)
        .collect();
    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for start in 0..w * h {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut area, mut sum_gray, mut sum_contrast) = (0usize, 0i64, 0i64);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        while let Some(k) = stack.pop() {
            let (x, y) = (k % w, k / w);
            area += 1;
            sum_gray += gray[k] as i64;
            sum_contrast += (gray[k] - bg).abs() as i64;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut visit = |n: usize| {
                if fg[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if x > 0 {
                visit(k - 1);
            }
            if x + 1 < w {
                visit(k + 1);
            }
            if y > 0 {
                visit(k - w);
            }
            if y + 1 < h {
                visit(k + w);
            }
        }
        if area < params.min_area {
            continue;
        }
        let mean_gray = sum_gray as f64 / area as f64;
        let class_id = if mean_gray < bg as f64 { 0 } else { 1 };
        let confidence = (sum_contrast as f64 / area as f64 / 128.0).min(1.0);
        out.push(Detection {
            class_id,
            confidence,
            bbox: BoundingBox {
                x_min: x0 as f64,
                y_min: y0 as f64,
                x_max: x1 as f64,
                y_max: y1 as f64,
            },
        });
    }
    canonical_sort(&mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiskObject {
    pub class_id: usize,
    pub cx: i64,
    pub cy: i64,
    pub radius: i64,
    /// Gray level written to all three channels.
    pub fill: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub detector: SyntheticParams,
    pub objects: Vec<DiskObject>,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bg = self.detector.background as i64;
        let t = self.detector.contrast_threshold as i64;
        for (k, o) in self.objects.iter().enumerate() {
            if o.radius < 1 {
                return Err(Error::Scene(format!("object {k}: radius must be positive")));
            }
            if o.cx - o.radius < 0
                || o.cy - o.radius < 0
                || o.cx + o.radius >= self.width as i64
                || o.cy + o.radius >= self.height as i64
            {
                return Err(Error::Scene(format!("object {k} leaves the image")));
            }
            let contrast = o.fill as i64 - bg;
            if contrast.abs() <= t {
                return Err(Error::Scene(format!(
                    "object {k}: fill {} within the detection threshold of the background",
                    o.fill
                )));
            }
            let expected = if contrast < 0 { 0 } else { 1 };
            if o.class_id != expected {
                return Err(Error::Scene(format!(
                    "object {k}: class {} inconsistent with its fill (expected {expected})",
                    o.class_id
                )));
            }
            for (j, p) in self.objects[..k].iter().enumerate() {
                let d2 = (o.cx - p.cx).pow(2) + (o.cy - p.cy).pow(2);
                // disks must be separated by at least one background pixel
                if d2 <= (o.radius + p.radius + 1).pow(2) {
                    return Err(Error::Scene(format!("objects {j} and {k} overlap or touch")));
                }
            }
        }
        Ok(())
    }
}

/// Flat background with filled disks; annotations are the exact disk bounding boxes.
pub fn render_synthetic_scene(spec: &SyntheticSceneSpec) -> Result<(RgbImage, Vec<Annotation>)> {
    spec.validate()?;
    let bg = spec.detector.background;
    let mut image = RgbImage::from_pixel(spec.width, spec.height, Rgb([bg, bg, bg]));
    let mut annotations = Vec::with_capacity(spec.objects.len());
    for o in &spec.objects {
        for y in (o.cy - o.radius)..=(o.cy + o.radius) {
            for x in (o.cx - o.radius)..=(o.cx + o.radius) {
                if (x - o.cx).pow(2) + (y - o.cy).pow(2) <= o.radius.pow(2) {
                    image.put_pixel(x as u32, y as u32, Rgb([o.fill; 3]));
                }
            }
        }
        annotations.push(Annotation {
            class_id: o.class_id,
            class_name: SYNTHETIC_CLASSES[o.class_id].to_string(),
            bbox: BoundingBox {
                x_min: (o.cx - o.radius) as f64,
                y_min: (o.cy - o.radius) as f64,
                x_max: (o.cx + o.radius) as f64,
                y_max: (o.cy + o.radius) as f64,
            },
        });
    }
    Ok((image, annotations))
}

/// Parameters of the random scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSuiteParams {
    pub width: u32,
    pub height: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_radius: i64,
    pub max_radius: i64,
    /// Absolute fill contrast range against the background.
    pub min_contrast: u8,
    pub max_contrast: u8,
    /// Probability that an object is bright (class 1) rather than dark.
    pub bright_fraction: f64,
    pub detector: SyntheticParams,
}

impl Default for SceneSuiteParams {
    fn default() -> Self {
        SceneSuiteParams {
            width: 160,
            height: 120,
            min_objects: 2,
            max_objects: 4,
            min_radius: 6,
            max_radius: 12,
            min_contrast: 70,
            max_contrast: 85,
            bright_fraction: 0.5,
            detector: SyntheticParams::default(),
        }
    }
}

/// Deterministic suite of `count` random non-overlapping disk scenes.
pub fn generate_scene_suite(count: usize, seed: u64, p: &SceneSuiteParams) -> Result<Vec<SyntheticSceneSpec>> {
    if p.min_objects > p.max_objects
        || p.min_radius < 1
        || p.min_radius > p.max_radius
        || p.min_contrast <= p.detector.contrast_threshold
        || p.min_contrast > p.max_contrast
    {
        return Err(Error::Scene(format!("inconsistent suite parameters {p:?}")));
    }
    let mut rng = seeded_rng(seed);
    let bg = p.detector.background as i64;
    let mut scenes = Vec::with_capacity(count);
    for s in 0..count {
        let n = rng.gen_range(p.min_objects..=p.max_objects);
        let mut spec = SyntheticSceneSpec {
            id: format!("scene_{s:03}"),
            width: p.width,
            height: p.height,
            detector: p.detector,
            objects: Vec::with_capacity(n),
        };
        let mut attempts = 0;
        while spec.objects.len() < n {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Scene(format!("could not place {n} disks in scene {s}")));
            }
            let radius = rng.gen_range(p.min_radius..=p.max_radius);
            let cx = rng.gen_range(radius..p.width as i64 - radius);
            let cy = rng.gen_range(radius..p.height as i64 - radius);
            let contrast = rng.gen_range(p.min_contrast..=p.max_contrast) as i64;
            let bright = rng.gen_bool(p.bright_fraction);
            let fill = if bright { bg + contrast } else { bg - contrast }.clamp(0, 255) as u8;
            let candidate = DiskObject {
                class_id: bright as usize,
                cx,
                cy,
                radius,
                fill,
            };
            spec.objects.push(candidate);
            if spec.validate().is_err() {
                spec.objects.pop();
            }
        }
        scenes.push(spec);
    }
    Ok(scenes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeRequest {
    pub id: String,
    pub image_png_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub class_id: i64,
    pub conf: f64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeResponse {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<WireDetection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn encode_png_b64(image: &RgbImage) -> Result<String, DetectorError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    image
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| DetectorError::Transport(format!("png encoding failed: {e}")))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

/// One request line, without the trailing newline.
pub fn encode_request(id: &str, image: &RgbImage) -> Result<String, DetectorError> {
    let req = BridgeRequest {
        id: id.to_string(),
        image_png_b64: encode_png_b64(image)?,
    };
    serde_json::to_string(&req).map_err(|e| DetectorError::Transport(e.to_string()))
}

fn protocol(message: impl Into<String>, payload: &str) -> DetectorError {
    DetectorError::Protocol {
        message: message.into(),
        payload: payload.chars().take(512).collect(),
    }
}

/// Parses and validates one response line against the request id.
pub fn parse_response_line(line: &str, expected_id: &str) -> Result<Vec<Detection>, DetectorError> {
    let resp: BridgeResponse = serde_json::from_str(line.trim_end())
        .map_err(|e| protocol(format!("malformed response: {e}"), line))?;
    if resp.id != expected_id {
        return Err(protocol(
            format!("response id `{}` does not match request `{expected_id}`", resp.id),
            line,
        ));
    }
    if let Some(message) = resp.error {
        return Err(DetectorError::Remote { id: resp.id, message });
    }
    let wire = resp
        .detections
        .ok_or_else(|| protocol("response has neither detections nor error", line))?;
    wire.into_iter()
        .map(|d| {
            let [x0, y0, x1, y1] = d.bbox;
            let bbox = BoundingBox::new(x0, y0, x1, y1)
                .map_err(|_| protocol(format!("invalid bbox {:?}", d.bbox), line))?;
            if d.class_id < 0 {
                return Err(protocol(format!("negative class id {}", d.class_id), line));
            }
            if !(0.0..=1.0).contains(&d.conf) {
                return Err(protocol(format!("confidence {} outside [0, 1]", d.conf), line));
            }
            Ok(Detection {
                class_id: d.class_id as usize,
                confidence: d.conf,
                bbox,
            })
        })
        .collect()
}

struct BridgeProcess {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl BridgeProcess {
    fn spawn(command: &str) -> Result<Self, DetectorError> {
        let spawn_err = |message: String| DetectorError::Spawn {
            command: command.to_string(),
            message,
        };
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| spawn_err(e.to_string()))?;
        let stdin = child.stdin.take().ok_or_else(|| spawn_err("no stdin".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| spawn_err("no stdout".into()))?;
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Ok(BridgeProcess {
            child,
            stdin,
            lines: rx,
        })
    }

    fn exchange(&mut self, request: &str, id: &str, timeout: Duration) -> Result<Vec<Detection>, DetectorError> {
        self.stdin
            .write_all(request.as_bytes())
            .and_then(|_| self.stdin.write_all(b"\n"))
            .and_then(|_| self.stdin.flush())
            .map_err(|e| DetectorError::Transport(format!("write failed: {e}")))?;
        let line = match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(DetectorError::Transport(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => return Err(DetectorError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(DetectorError::Transport("bridge closed its output".into()))
            }
        };
        if !line.ends_with('\n') {
            return Err(protocol("truncated response line", &line));
        }
        parse_response_line(&line, id)
    }
}

impl Drop for BridgeProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Pool of bridge processes, each serving one request at a time.
pub struct ExternalDetector {
    command: String,
    timeout: Duration,
    idle: Mutex<Vec<BridgeProcess>>,
    returned: Condvar,
    live: Mutex<usize>,
    pool_size: usize,
    next_id: AtomicU64,
}

impl ExternalDetector {
    pub fn spawn(command: &str, pool_size: usize, timeout: Duration) -> Result<Self, DetectorError> {
        let pool_size = pool_size.max(1);
        let procs = (0..pool_size)
            .map(|_| BridgeProcess::spawn(command))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ExternalDetector {
            command: command.to_string(),
            timeout,
            idle: Mutex::new(procs),
            returned: Condvar::new(),
            live: Mutex::new(pool_size),
            pool_size,
            next_id: AtomicU64::new(0),
        })
    }

    fn checkout(&self) -> Result<BridgeProcess, DetectorError> {
        let mut idle = self.idle.lock().expect("bridge pool poisoned");
        loop {
            if let Some(p) = idle.pop() {
                return Ok(p);
            }
            // a process was dropped after a failure; replace it
            {
                let mut live = self.live.lock().expect("bridge pool poisoned");
                if *live < self.pool_size {
                    *live += 1;
                    drop(live);
                    return BridgeProcess::spawn(&self.command).inspect_err(|_| {
                        *self.live.lock().expect("bridge pool poisoned") -= 1;
                    });
                }
            }
            idle = self.returned.wait(idle).expect("bridge pool poisoned");
        }
    }
}

impl Detector for ExternalDetector {
    fn detect(&self, image: &RgbImage) -> Result<Vec<Detection>, DetectorError> {
        let id = format!("req-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let request = encode_request(&id, image)?;
        let mut proc = self.checkout()?;
        let result = proc.exchange(&request, &id, self.timeout);
        match &result {
            // the process is still in sync after a well-formed remote error
            Ok(_) | Err(DetectorError::Remote { .. }) => {
                self.idle.lock().expect("bridge pool poisoned").push(proc);
            }
            Err(_) => {
                drop(proc);
                *self.live.lock().expect("bridge pool poisoned") -= 1;
            }
        }
        self.returned.notify_one();
        result
    }
}

/// Configured detector, as written in campaign files or on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DetectorSpec {
    Synthetic {
        #[serde(default)]
        params: SyntheticParams,
    },
    External {
        command: String,
        #[serde(default = "default_pool")]
        pool_size: usize,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
}

fn default_pool() -> usize {
    1
}

fn default_timeout() -> f64 {
    30.0
}

impl DetectorSpec {
    /// `synthetic`, `synthetic:<contrast threshold>` or `external:<command>`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "synthetic" {
            return Ok(DetectorSpec::Synthetic {
                params: SyntheticParams::default(),
            });
        }
        if let Some(t) = s.strip_prefix("synthetic:") {
            let contrast_threshold = t
                .parse()
                .map_err(|_| Error::Config(format!("bad synthetic contrast threshold `{t}`")))?;
            return Ok(DetectorSpec::Synthetic {
                params: SyntheticParams {
                    contrast_threshold,
                    ..SyntheticParams::default()
                },
            });
        }
        if let Some(cmd) = s.strip_prefix("external:") {
            if cmd.trim().is_empty() {
                return Err(Error::Config("external detector needs a command".into()));
            }
            return Ok(DetectorSpec::External {
                command: cmd.to_string(),
                pool_size: default_pool(),
                timeout_secs: default_timeout(),
            });
        }
        Err(Error::Config(format!("unknown detector `{s}`")))
    }

    pub fn build(&self, name: &str) -> Result<DetectorHandle> {
        match self {
            DetectorSpec::Synthetic { params } => Ok(DetectorHandle::synthetic(name, *params)),
            DetectorSpec::External {
                command,
                pool_size,
                timeout_secs,
            } => {
                let ext = ExternalDetector::spawn(
                    command,
                    *pool_size,
                    Duration::from_secs_f64(timeout_secs.max(0.001)),
                )?;
                Ok(DetectorHandle::new(
                    name,
                    DetectorKind::External,
                    true,
                    *pool_size > 1,
                    Arc::new(ext),
                ))
            }
        }
    }
}
