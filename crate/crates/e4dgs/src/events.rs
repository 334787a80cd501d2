//! Event records and the supervision-side kernels: ESI accumulation,
//! event-adaptive slicing, accumulation jitter, and count maps.
//!
//! Timestamps are integer microseconds in records and on disk, f64 seconds in
//! window arithmetic.

use crate::error::{E4dgsError, Result};
use crate::image::Image;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::Read;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t_us: u64,
    pub x: u16,
    pub y: u16,
    /// +1 brighter, -1 darker.
    pub p: i8,
}

/// Time-sorted event sequence for one camera.
#[derive(Debug, Clone)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: u16,
    pub height: u16,
    /// Positive / negative contrast thresholds in log-intensity units.
    pub c_pos: f64,
    pub c_neg: f64,
}

impl EventStream {
    pub fn new(events: Vec<Event>, width: u16, height: u16, c_pos: f64, c_neg: f64) -> Result<Self> {
        if c_pos <= 0.0 || c_neg <= 0.0 {
            return Err(E4dgsError::InvalidArgument(format!(
                "thresholds must be positive, got C+={c_pos}, C-={c_neg}"
            )));
        }
        for pair in events.windows(2) {
            if pair[1].t_us < pair[0].t_us {
                return Err(E4dgsError::InvalidArgument(
                    "events must be sorted by timestamp".into(),
                ));
            }
        }
        for e in &events {
            if e.x >= width || e.y >= height || (e.p != 1 && e.p != -1) {
                return Err(E4dgsError::InvalidArgument(format!(
                    "event out of bounds or bad polarity: {e:?}"
                )));
            }
        }
        Ok(Self {
            events,
            width,
            height,
            c_pos,
            c_neg,
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn threshold(&self, p: i8) -> f64 {
        if p > 0 {
            self.c_pos
        } else {
            self.c_neg
        }
    }
}

/// Half-open time window [t_start, t_end) plus the index range it covers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventWindow {
    pub t_start: f64,
    pub t_end: f64,
    pub start: usize,
    pub end: usize,
}

impl EventWindow {
    pub fn count(&self) -> usize {
        self.end - self.start
    }
}

/// Per-pixel accumulated log-intensity change with its trigger mask.
#[derive(Debug, Clone)]
pub struct EventFrame {
    pub width: usize,
    pub height: usize,
    pub delta_e: Vec<f64>,
    pub triggered: Vec<bool>,
}

impl EventFrame {
    fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            delta_e: vec![0.0; width * height],
            triggered: vec![false; width * height],
        }
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.delta_e.clone(),
        }
    }
}

/// Signed event counts (ground truth) or log-difference / threshold
/// (prediction), one value per pixel.
#[derive(Debug, Clone)]
pub struct CountMap {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<f64>,
}

/// ESI accumulation without jitter: ΔE(u) = Σ p·C^p over the window.
pub fn accumulate_esi(stream: &EventStream, window: &EventWindow) -> EventFrame {
    let mut frame = EventFrame::zeros(stream.width as usize, stream.height as usize);
    for e in &stream.events[window.start..window.end] {
        let i = e.y as usize * frame.width + e.x as usize;
        frame.delta_e[i] += e.p as f64 * stream.threshold(e.p);
        frame.triggered[i] = true;
    }
    frame
}

/// ESI accumulation with Gaussian jitter on silent pixels (Eq. 7 semantics):
/// triggered pixels carry the exact ESI sum, event-void pixels draw
/// Δ·N(0, σ²) with Δ the window duration normalized by the sequence length.
pub fn accumulate_with_jitter(
    stream: &EventStream,
    window: &EventWindow,
    sigma_noise: f64,
    total_duration: f64,
    rng: &mut impl Rng,
) -> EventFrame {
    let mut frame = accumulate_esi(stream, window);
    if sigma_noise <= 0.0 {
        return frame;
    }
    let scale = (window.t_end - window.t_start) / total_duration;
    let normal = Normal::new(0.0, sigma_noise).expect("sigma_noise >= 0");
    for i in 0..frame.delta_e.len() {
        if !frame.triggered[i] {
            frame.delta_e[i] = scale * normal.sample(rng);
        }
    }
    frame
}

/// Ground-truth signed event count per pixel.
pub fn count_map_gt(stream: &EventStream, window: &EventWindow) -> CountMap {
    let width = stream.width as usize;
    let height = stream.height as usize;
    let mut counts = vec![0.0; width * height];
    for e in &stream.events[window.start..window.end] {
        counts[e.y as usize * width + e.x as usize] += e.p as f64;
    }
    CountMap {
        width,
        height,
        counts,
    }
}

/// Predicted count map from two log-intensity renders and the learnable
/// threshold: N_pred = (L_curr - L_prev) / Ĉ.
pub fn count_map_pred(l_prev: &Image, l_curr: &Image, c_hat: f64) -> Result<CountMap> {
    if !l_prev.same_shape(l_curr) || l_prev.channels != 1 {
        return Err(E4dgsError::ContractViolation(
            "count_map_pred expects two single-channel log images of equal shape".into(),
        ));
    }
    if c_hat <= 0.0 {
        return Err(E4dgsError::ContractViolation(format!(
            "threshold must be positive, got {c_hat}"
        )));
    }
    let counts = l_curr
        .data
        .iter()
        .zip(&l_prev.data)
        .map(|(c, p)| (c - p) / c_hat)
        .collect();
    Ok(CountMap {
        width: l_prev.width,
        height: l_prev.height,
        counts,
    })
}

/// Chronological partition of the stream into windows whose event counts are
/// drawn uniformly from [n_min, n_max]; the final window may run short.
/// Boundaries sit at the timestamp midpoint between the last included and the
/// next excluded event; a cut inside a run of equal timestamps is pushed past
/// the run so windows stay half-open in time.
pub fn adaptive_slice(
    stream: &EventStream,
    n_min: usize,
    n_max: usize,
    rng: &mut impl Rng,
) -> Result<Vec<EventWindow>> {
    if n_min < 1 || n_min > n_max {
        return Err(E4dgsError::InvalidArgument(format!(
            "bad slice range [{n_min}, {n_max}]"
        )));
    }
    let n = stream.events.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut windows = Vec::new();
    let mut start = 0usize;
    let mut t_start = (stream.events[0].t_us as f64 * 1e-6 - 0.5e-6).max(0.0);
    while start < n {
        let target = rng.gen_range(n_min..=n_max);
        let mut end = (start + target).min(n);
        while end < n && stream.events[end].t_us == stream.events[end - 1].t_us {
            end += 1;
        }
        let t_end = if end < n {
            0.5e-6 * (stream.events[end - 1].t_us + stream.events[end].t_us) as f64
        } else {
            (stream.events[n - 1].t_us + 1) as f64 * 1e-6
        };
        windows.push(EventWindow {
            t_start,
            t_end,
            start,
            end,
        });
        start = end;
        t_start = t_end;
    }
    Ok(windows)
}

// ---------------------------------------------------------------------------
// Event file I/O
// ---------------------------------------------------------------------------
//
// Binary layout (little-endian):
//   header (16 bytes): magic "EVT1", width u16, height u16, count u64
//   records (16 bytes each): t u64, x u16, y u16, p i8, 3 pad bytes
// A plain-text CSV fallback (t_us,x,y,p) is accepted on input.

const EVT_MAGIC: &[u8; 4] = b"EVT1";

pub fn write_events(path: &Path, stream: &EventStream) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + stream.events.len() * 16);
    buf.extend_from_slice(EVT_MAGIC);
    buf.extend_from_slice(&stream.width.to_le_bytes());
    buf.extend_from_slice(&stream.height.to_le_bytes());
    buf.extend_from_slice(&(stream.events.len() as u64).to_le_bytes());
    for e in &stream.events {
        buf.extend_from_slice(&e.t_us.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(e.p as u8);
        buf.extend_from_slice(&[0u8; 3]);
    }
    std::fs::write(path, buf).map_err(|e| E4dgsError::io(path, e))
}

/// Reads the binary format, falling back to CSV when the magic is absent.
/// Thresholds are not stored in either format and must be supplied.
pub fn read_events(path: &Path, c_pos: f64, c_neg: f64) -> Result<EventStream> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| E4dgsError::io(path, e))?;
    if bytes.len() >= 4 && &bytes[..4] == EVT_MAGIC {
        read_events_binary(path, &bytes, c_pos, c_neg)
    } else {
        read_events_csv(path, &bytes, c_pos, c_neg)
    }
}

fn read_events_binary(path: &Path, bytes: &[u8], c_pos: f64, c_neg: f64) -> Result<EventStream> {
    if bytes.len() < 16 {
        return Err(E4dgsError::parse(path, "truncated header"));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let available = (bytes.len() - 16) / 16;
    if available < count || (bytes.len() - 16) % 16 != 0 {
        return Err(E4dgsError::parse(
            path,
            format!("header declares {count} records, file holds {available}"),
        ));
    }
    let mut events = Vec::with_capacity(count);
    for i in 0..count {
        let off = 16 + i * 16;
        let r = &bytes[off..off + 16];
        events.push(Event {
            t_us: u64::from_le_bytes(r[0..8].try_into().unwrap()),
            x: u16::from_le_bytes([r[8], r[9]]),
            y: u16::from_le_bytes([r[10], r[11]]),
            p: r[12] as i8,
        });
    }
    EventStream::new(events, width, height, c_pos, c_neg)
}

fn read_events_csv(path: &Path, bytes: &[u8], c_pos: f64, c_neg: f64) -> Result<EventStream> {
    let text = std::str::from_utf8(bytes).map_err(|_| E4dgsError::parse(path, "not utf-8"))?;
    let mut events = Vec::new();
    let mut max_x = 0u16;
    let mut max_y = 0u16;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with(|c: char| !c.is_ascii_digit())) {
            continue; // header or blank
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(E4dgsError::parse(
                path,
                format!("line {}: expected 4 fields, got {}", lineno + 1, fields.len()),
            ));
        }
        let parse_err = |what: &str| E4dgsError::parse(path, format!("line {}: bad {what}", lineno + 1));
        let e = Event {
            t_us: fields[0].parse().map_err(|_| parse_err("t_us"))?,
            x: fields[1].parse().map_err(|_| parse_err("x"))?,
            y: fields[2].parse().map_err(|_| parse_err("y"))?,
            p: fields[3].parse().map_err(|_| parse_err("p"))?,
        };
        max_x = max_x.max(e.x);
        max_y = max_y.max(e.y);
        events.push(e);
    }
    EventStream::new(events, max_x + 1, max_y + 1, c_pos, c_neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn ev(t_us: u64, x: u16, y: u16, p: i8) -> Event {
        Event { t_us, x, y, p }
    }

    fn toy_stream(events: Vec<Event>) -> EventStream {
        EventStream::new(events, 4, 4, 0.15, 0.15).unwrap()
    }

    fn full_window(stream: &EventStream) -> EventWindow {
        EventWindow {
            t_start: 0.0,
            t_end: (stream.events.last().map(|e| e.t_us + 1).unwrap_or(1)) as f64 * 1e-6,
            start: 0,
            end: stream.events.len(),
        }
    }

    #[test]
    fn esi_sums_thresholds() {
        let s = toy_stream(vec![ev(10, 1, 2, 1), ev(20, 1, 2, 1)]);
        let f = accumulate_esi(&s, &full_window(&s));
        assert!((f.delta_e[2 * 4 + 1] - 0.30).abs() < 1e-15);
        assert!(f.triggered[2 * 4 + 1]);
    }

    #[test]
    fn opposite_polarities_neutralize() {
        let s = toy_stream(vec![ev(10, 0, 0, 1), ev(20, 0, 0, -1)]);
        let f = accumulate_esi(&s, &full_window(&s));
        assert_eq!(f.delta_e[0], 0.0);
        assert!(f.triggered[0]); // neutralized, but the pixel did fire
        assert_eq!(f.delta_e[1], 0.0);
        assert!(!f.triggered[1]);
    }

    #[test]
    fn empty_window_is_all_zero() {
        let s = toy_stream(vec![ev(10, 0, 0, 1)]);
        let w = EventWindow {
            t_start: 0.0,
            t_end: 1e-6,
            start: 0,
            end: 0,
        };
        let f = accumulate_esi(&s, &w);
        assert!(f.delta_e.iter().all(|&v| v == 0.0));
        assert!(f.triggered.iter().all(|&t| !t));
    }

    #[test]
    fn count_map_gt_signed_counts_and_esi_identity() {
        let s = toy_stream(vec![
            ev(10, 3, 3, -1),
            ev(20, 3, 3, -1),
            ev(30, 3, 3, -1),
            ev(40, 0, 1, 1),
        ]);
        let w = full_window(&s);
        let gt = count_map_gt(&s, &w);
        assert_eq!(gt.counts[3 * 4 + 3], -3.0);
        // Symmetric thresholds: N_gt * C equals the ESI frame exactly.
        let esi = accumulate_esi(&s, &w);
        for (c, e) in gt.counts.iter().zip(&esi.delta_e) {
            assert_eq!(c * 0.15, *e);
        }
    }

    #[test]
    fn count_map_pred_is_log_difference_over_threshold() {
        let l_prev = Image::filled(4, 4, 1, -0.4);
        let l_curr = Image::filled(4, 4, 1, -0.1);
        let m = count_map_pred(&l_prev, &l_curr, 0.15).unwrap();
        for v in &m.counts {
            assert!((v - 2.0).abs() < 1e-12);
        }
        let m2 = count_map_pred(&l_prev, &l_curr, 0.30).unwrap();
        for v in &m2.counts {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(count_map_pred(&l_prev, &l_curr, 0.0).is_err());
    }

    #[test]
    fn jitter_only_touches_silent_pixels() {
        let s = toy_stream(vec![ev(500_000, 1, 1, 1)]);
        let w = full_window(&s);
        let base = accumulate_esi(&s, &w);
        let mut r1 = StdRng::seed_from_u64(1);
        let mut r2 = StdRng::seed_from_u64(2);
        let f1 = accumulate_with_jitter(&s, &w, 0.02, 1.0, &mut r1);
        let f2 = accumulate_with_jitter(&s, &w, 0.02, 1.0, &mut r2);
        let i = 1 * 4 + 1;
        assert_eq!(f1.delta_e[i].to_bits(), f2.delta_e[i].to_bits());
        assert_eq!(f1.delta_e[i], base.delta_e[i]);
        // At least one silent pixel differs across seeds.
        assert!(f1.delta_e.iter().zip(&f2.delta_e).any(|(a, b)| a != b));
    }

    #[test]
    fn zero_sigma_jitter_degenerates_to_esi() {
        let s = toy_stream(vec![ev(10, 1, 1, 1)]);
        let w = full_window(&s);
        let mut rng = StdRng::seed_from_u64(0);
        let f = accumulate_with_jitter(&s, &w, 0.0, 1.0, &mut rng);
        assert_eq!(f.delta_e, accumulate_esi(&s, &w).delta_e);
    }

    #[test]
    fn jitter_variance_matches_scaled_sigma() {
        let s = EventStream::new(vec![], 400, 250, 0.15, 0.15).unwrap();
        let w = EventWindow {
            t_start: 0.0,
            t_end: 0.25,
            start: 0,
            end: 0,
        };
        let mut rng = StdRng::seed_from_u64(9);
        let f = accumulate_with_jitter(&s, &w, 0.02, 1.0, &mut rng);
        let n = f.delta_e.len() as f64;
        let var = f.delta_e.iter().map(|v| v * v).sum::<f64>() / n;
        let expected = (0.25 * 0.02f64).powi(2);
        assert!((var - expected).abs() / expected < 0.1, "var={var}, expected={expected}");
    }

    #[test]
    fn slicing_partitions_and_respects_counts() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..200 {
            let n: usize = rng.gen_range(1..5000);
            let mut t = 0u64;
            let events: Vec<Event> = (0..n)
                .map(|_| {
                    t += rng.gen_range(1..50);
                    ev(t, rng.gen_range(0..4), rng.gen_range(0..4), if rng.gen() { 1 } else { -1 })
                })
                .collect();
            let s = toy_stream(events);
            let n_min = rng.gen_range(1..200);
            let n_max = n_min + rng.gen_range(0..200);
            let windows = adaptive_slice(&s, n_min, n_max, &mut rng).unwrap();

            let mut cursor = 0usize;
            for (i, w) in windows.iter().enumerate() {
                assert_eq!(w.start, cursor);
                cursor = w.end;
                assert!(w.t_start < w.t_end);
                if i + 1 < windows.len() {
                    assert!(w.count() >= n_min && w.count() <= n_max);
                    assert!((w.t_end - windows[i + 1].t_start).abs() < 1e-15);
                }
                for e in &s.events[w.start..w.end] {
                    let ts = e.t_us as f64 * 1e-6;
                    assert!(ts >= w.t_start && ts < w.t_end);
                }
            }
            assert_eq!(cursor, s.len());
        }
    }

    #[test]
    fn undersized_stream_yields_single_window() {
        let mut rng = StdRng::seed_from_u64(0);
        let events: Vec<Event> = (0..100).map(|i| ev(i * 10 + 1, 0, 0, 1)).collect();
        let s = toy_stream(events);
        let windows = adaptive_slice(&s, 5000, 10000, &mut rng).unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].count(), 100);
    }

    #[test]
    fn ten_thousand_events_split_into_one_or_two() {
        let mut rng = StdRng::seed_from_u64(5);
        let events: Vec<Event> = (0..10_000).map(|i| ev(i + 1, 0, 0, 1)).collect();
        let s = toy_stream(events);
        let windows = adaptive_slice(&s, 5_000, 10_000, &mut rng).unwrap();
        assert!(windows.len() == 1 || windows.len() == 2, "got {}", windows.len());
        assert_eq!(windows.iter().map(EventWindow::count).sum::<usize>(), 10_000);
    }

    #[test]
    fn empty_stream_slices_to_nothing() {
        let s = EventStream::new(vec![], 4, 4, 0.15, 0.15).unwrap();
        let mut rng = StdRng::seed_from_u64(0);
        assert!(adaptive_slice(&s, 1, 10, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn binary_round_trip_and_csv_agreement() {
        let dir = tempfile::tempdir().unwrap();
        let s = toy_stream(vec![ev(10, 0, 0, 1), ev(25, 3, 2, -1), ev(25, 1, 1, 1)]);
        let bin = dir.path().join("events.bin");
        write_events(&bin, &s).unwrap();
        let back = read_events(&bin, 0.15, 0.15).unwrap();
        assert_eq!(back.events, s.events);
        assert_eq!((back.width, back.height), (4, 4));

        let csv = dir.path().join("events.csv");
        let mut text = String::from("t_us,x,y,p\n");
        for e in &s.events {
            text.push_str(&format!("{},{},{},{}\n", e.t_us, e.x, e.y, e.p));
        }
        std::fs::write(&csv, text).unwrap();
        let from_csv = read_events(&csv, 0.15, 0.15).unwrap();
        assert_eq!(from_csv.events, back.events);
    }

    #[test]
    fn truncated_binary_names_counts() {
        let dir = tempfile::tempdir().unwrap();
        let s = toy_stream(vec![ev(10, 0, 0, 1), ev(20, 1, 1, -1)]);
        let path = dir.path().join("events.bin");
        write_events(&path, &s).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        let err = read_events(&path, 0.15, 0.15).unwrap_err();
        assert!(err.to_string().contains("declares 2 records, file holds 1"), "{err}");
    }
}
