//! Deterministic synthetic signature corpus and on-disk dataset ingestion.
//!
//! Each synthetic user is a small set of Lissajous stroke curves. Genuine
//! samples re-trace the user's base geometry with small seeded amplitude,
//! phase, and timing jitter. Skilled forgeries re-trace the same geometry but
//! with different kinematics: a slower, steadier pace (more samples per
//! stroke), a flattened speed profile, and a pressure envelope drawn from the
//! forger's seed. Random forgeries need no generation — they are other users'
//! genuine signatures.
//!
//! On disk: one capture CSV per signature under
//! `<root>/<user_id>/s<session>/<sig_id>.csv`, plus a JSON manifest.

use std::collections::HashSet;
use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::signal::{read_signature_csv, write_signature_csv, RawSignature, SamplePoint};

/// One Lissajous stroke: center, amplitudes, frequencies, phases, samples.
#[derive(Debug, Clone)]
pub struct StrokeSpec {
    pub center: (f64, f64),
    pub amplitude: (f64, f64),
    pub frequency: (f64, f64),
    pub phase: (f64, f64),
    pub points: usize,
}

#[derive(Debug, Clone)]
pub struct PressureSpec {
    pub base: f64,
    pub span: f64,
    /// Exponent of the sine arch; larger is peakier.
    pub shape: f64,
}

/// Deterministic description of one synthetic writer.
#[derive(Debug, Clone)]
pub struct SyntheticUserSpec {
    pub seed: u64,
    pub strokes: Vec<StrokeSpec>,
    pub pressure: PressureSpec,
    /// Seconds per device sample while writing naturally.
    pub pace: f64,
}

impl SyntheticUserSpec {
    /// Draws a writer from a seed. Stroke counts and sample counts are sized
    /// so every generated signature lands in the 100..=400 point range, the
    /// forged re-traces included.
    pub fn from_seed(seed: u64) -> Self {
        let mut r = rng::stream(rng::derive_seed(seed, "user-spec", &[]));
        let n_strokes = 2 + rng::index(&mut r, 2); // 2 or 3
        let strokes = (0..n_strokes)
            .map(|_| StrokeSpec {
                center: (
                    rng::uniform(&mut r, -0.5, 0.5),
                    rng::uniform(&mut r, -0.5, 0.5),
                ),
                amplitude: (
                    rng::uniform(&mut r, 0.35, 0.75),
                    rng::uniform(&mut r, 0.35, 0.75),
                ),
                frequency: (
                    rng::uniform(&mut r, 0.8, 3.2),
                    rng::uniform(&mut r, 0.8, 3.2),
                ),
                phase: (rng::uniform(&mut r, 0.0, TAU), rng::uniform(&mut r, 0.0, TAU)),
                points: 52 + rng::index(&mut r, 13), // 52..=64
            })
            .collect();
        let pressure = PressureSpec {
            base: rng::uniform(&mut r, 0.25, 0.45),
            span: rng::uniform(&mut r, 0.35, 0.55),
            shape: rng::uniform(&mut r, 0.6, 1.8),
        };
        SyntheticUserSpec {
            seed,
            strokes,
            pressure,
            pace: rng::uniform(&mut r, 0.005, 0.009),
        }
    }
}

/// How a single trace run distorts the base geometry and kinematics.
struct TraceStyle {
    amp_jitter: f64,
    phase_jitter: f64,
    /// Amplitude of the monotone speed warp over the stroke parameter.
    speed_warp: f64,
    /// Amplitude of the smooth per-point timing modulation.
    time_warp: f64,
    /// Per-point multiplicative timing noise.
    time_noise: f64,
    /// Sample count multiplier (slower tracing records more points).
    point_ratio: f64,
    pressure: PressureSpec,
    pressure_noise: f64,
}

fn trace(spec: &SyntheticUserSpec, style: &TraceStyle, r: &mut rand_chacha::ChaCha8Rng) -> RawSignature {
    let mut points = Vec::new();
    let mut t = 0.0f64;
    for (s_ix, stroke) in spec.strokes.iter().enumerate() {
        if s_ix > 0 {
            t += rng::uniform(r, 0.06, 0.18); // pen lift
        }
        let n = ((stroke.points as f64) * style.point_ratio).round() as usize;
        let ma = 1.0 + rng::uniform(r, -style.amp_jitter, style.amp_jitter);
        let mb = 1.0 + rng::uniform(r, -style.amp_jitter, style.amp_jitter);
        let dpa = rng::uniform(r, -style.phase_jitter, style.phase_jitter);
        let dpb = rng::uniform(r, -style.phase_jitter, style.phase_jitter);
        let warp_phase = rng::uniform(r, 0.0, TAU);
        let time_phase = rng::uniform(r, 0.0, TAU);
        let env_jitter = 1.0 + rng::uniform(r, -0.05, 0.05);
        for j in 0..n {
            let u0 = j as f64 / (n - 1) as f64;
            // monotone speed warp: |derivative| stays positive
            let u = u0 + style.speed_warp * (TAU * u0 + warp_phase).sin() / TAU;
            let x = stroke.center.0
                + ma * stroke.amplitude.0 * (stroke.frequency.0 * TAU * u + stroke.phase.0 + dpa).sin();
            let y = stroke.center.1
                + mb * stroke.amplitude.1 * (stroke.frequency.1 * TAU * u + stroke.phase.1 + dpb).sin();
            let envelope = style.pressure.base
                + style.pressure.span * (PI * u0).sin().abs().powf(style.pressure.shape);
            let p = (envelope * env_jitter
                + style.pressure_noise * rng::uniform(r, -1.0, 1.0))
            .clamp(0.05, 1.0);
            let f = if j == 0 {
                1
            } else if j == n - 1 {
                2
            } else {
                0
            };
            points.push(SamplePoint {
                x: 1800.0 + 750.0 * x,
                y: 1200.0 + 750.0 * y,
                p,
                t,
                f,
            });
            if j + 1 < n {
                let modulation = 1.0 + style.time_warp * (TAU * u0 + time_phase).sin();
                let noise = 1.0 + rng::uniform(r, -style.time_noise, style.time_noise);
                t += spec.pace * modulation * noise;
            } else {
                t += spec.pace;
            }
        }
    }
    // timestamps are cumulative from zero by construction
    debug_assert_eq!(points[0].t, 0.0);
    RawSignature { points }
}

/// Generates a user's genuine signatures and skilled forgeries.
///
/// Identical specs always produce identical output.
pub fn generate_user(
    spec: &SyntheticUserSpec,
    n_genuine: usize,
    n_skilled: usize,
) -> (Vec<RawSignature>, Vec<RawSignature>) {
    let genuine = (0..n_genuine)
        .map(|i| {
            let mut r = rng::stream(rng::derive_seed(spec.seed, "genuine", &[i as u64]));
            let style = TraceStyle {
                amp_jitter: 0.05,
                phase_jitter: 0.05,
                speed_warp: 0.12,
                time_warp: 0.08,
                time_noise: 0.02,
                point_ratio: 1.0,
                pressure: spec.pressure.clone(),
                pressure_noise: 0.015,
            };
            trace(spec, &style, &mut r)
        })
        .collect();
    let skilled = (0..n_skilled)
        .map(|i| {
            let mut r = rng::stream(rng::derive_seed(spec.seed, "skilled", &[i as u64]));
            // a forger copies the shape but not the rhythm: more samples at a
            // steadier rate, a flat speed profile, and their own pressure
            // habits
            let style = TraceStyle {
                amp_jitter: 0.05,
                phase_jitter: 0.05,
                speed_warp: 0.015,
                time_warp: 0.01,
                time_noise: 0.015,
                point_ratio: rng::uniform(&mut r, 1.25, 1.55),
                pressure: PressureSpec {
                    base: rng::uniform(&mut r, 0.45, 0.6),
                    span: rng::uniform(&mut r, 0.15, 0.3),
                    shape: rng::uniform(&mut r, 2.0, 3.0),
                },
                pressure_noise: 0.015,
            };
            trace(spec, &style, &mut r)
        })
        .collect();
    (genuine, skilled)
}

// ---- manifest ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Genuine,
    SkilledForgery,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSignature {
    pub sig_id: String,
    pub session: u32,
    pub path: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forger_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestUser {
    pub user_id: String,
    pub split: Split,
    pub signatures: Vec<ManifestSignature>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub users: Vec<ManifestUser>,
}

/// A loaded, validated signature with its manifest metadata.
#[derive(Debug, Clone)]
pub struct LoadedSig {
    pub sig_id: String,
    pub session: u32,
    pub rel_path: String,
    pub raw: RawSignature,
    pub forger_id: Option<String>,
}

#[derive(Debug, Clone)]
pub struct UserData {
    pub user_id: String,
    pub split: Split,
    pub genuine: Vec<LoadedSig>,
    pub skilled: Vec<LoadedSig>,
}

/// In-memory dataset with per-user genuine/forged pools in capture order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub users: Vec<UserData>,
}

impl Dataset {
    pub fn train_users(&self) -> Vec<usize> {
        (0..self.users.len())
            .filter(|&i| self.users[i].split == Split::Train)
            .collect()
    }

    pub fn test_users(&self) -> Vec<usize> {
        (0..self.users.len())
            .filter(|&i| self.users[i].split == Split::Test)
            .collect()
    }
}

/// Minimum per-user pools required of test-split users.
pub const TEST_MIN_GENUINE: usize = 5;
pub const TEST_MIN_SKILLED: usize = 5;

/// Writes a full synthetic corpus: capture CSVs plus `manifest.json`.
///
/// Sessions alternate 1/2 over each user's samples to emulate two-session
/// capture. Skilled forgeries are attributed to the next user (cyclically) as
/// the forger.
pub fn generate_dataset(
    root: &Path,
    seed: u64,
    n_train_users: usize,
    n_test_users: usize,
    sigs_per_user: usize,
) -> Result<DatasetManifest> {
    assert!(n_train_users >= 1 && n_test_users >= 1 && sigs_per_user >= 1);
    let total = n_train_users + n_test_users;
    let mut users = Vec::with_capacity(total);
    for u in 0..total {
        let user_id = format!("u{u:03}");
        let split = if u < n_train_users {
            Split::Train
        } else {
            Split::Test
        };
        let spec = SyntheticUserSpec::from_seed(rng::derive_seed(seed, "user", &[u as u64]));
        let (genuine, skilled) = generate_user(&spec, sigs_per_user, sigs_per_user);
        let forger_id = format!("u{:03}", (u + 1) % total);
        let mut signatures = Vec::with_capacity(2 * sigs_per_user);
        for (i, sig) in genuine.iter().enumerate() {
            let session = 1 + (i % 2) as u32;
            let sig_id = format!("g{i:02}");
            let rel = format!("{user_id}/s{session}/{sig_id}.csv");
            let path = root.join(&rel);
            fs::create_dir_all(path.parent().unwrap())?;
            write_signature_csv(&path, sig)?;
            signatures.push(ManifestSignature {
                sig_id,
                session,
                path: rel,
                label: Label::Genuine,
                forger_id: None,
            });
        }
        for (i, sig) in skilled.iter().enumerate() {
            let session = 1 + (i % 2) as u32;
            let sig_id = format!("f{i:02}");
            let rel = format!("{user_id}/s{session}/{sig_id}.csv");
            let path = root.join(&rel);
            fs::create_dir_all(path.parent().unwrap())?;
            write_signature_csv(&path, sig)?;
            signatures.push(ManifestSignature {
                sig_id,
                session,
                path: rel,
                label: Label::SkilledForgery,
                forger_id: Some(forger_id.clone()),
            });
        }
        users.push(ManifestUser {
            user_id,
            split,
            signatures,
        });
    }
    let manifest = DatasetManifest {
        version: 1,
        seed,
        users,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(root.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Loads and validates a dataset from its manifest.
///
/// Every referenced file must exist and parse; capture grammar violations,
/// duplicate ids, and undersized test users are rejected with the offending
/// file or id named.
pub fn read_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    if manifest.version != 1 {
        return Err(Error::Manifest(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut seen_users = HashSet::new();
    let mut users = Vec::with_capacity(manifest.users.len());
    for mu in &manifest.users {
        if !seen_users.insert(mu.user_id.clone()) {
            return Err(Error::Manifest(format!("duplicate user id {}", mu.user_id)));
        }
        let mut seen_sigs = HashSet::new();
        let mut genuine = Vec::new();
        let mut skilled = Vec::new();
        for ms in &mu.signatures {
            if !seen_sigs.insert(ms.sig_id.clone()) {
                return Err(Error::Manifest(format!(
                    "duplicate signature id {} for user {}",
                    ms.sig_id, mu.user_id
                )));
            }
            let full = root.join(&ms.path);
            let raw = read_signature_csv(&full)?;
            raw.validate().map_err(|e| {
                Error::Manifest(format!("{}: {e}", full.display()))
            })?;
            let loaded = LoadedSig {
                sig_id: ms.sig_id.clone(),
                session: ms.session,
                rel_path: ms.path.clone(),
                raw,
                forger_id: ms.forger_id.clone(),
            };
            match ms.label {
                Label::Genuine => genuine.push(loaded),
                Label::SkilledForgery => skilled.push(loaded),
            }
        }
        if mu.split == Split::Test
            && (genuine.len() < TEST_MIN_GENUINE || skilled.len() < TEST_MIN_SKILLED)
        {
            return Err(Error::Manifest(format!(
                "test user {} needs >= {TEST_MIN_GENUINE} genuine and >= {TEST_MIN_SKILLED} skilled forgeries, has {}/{}",
                mu.user_id,
                genuine.len(),
                skilled.len()
            )));
        }
        users.push(UserData {
            user_id: mu.user_id.clone(),
            split: mu.split,
            genuine,
            skilled,
        });
    }
    Ok(Dataset { root, users })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::dtw_distance;
    use crate::signal::{assemble_input, centralize, extract_time_functions, normalize_signature};
    use ndarray::Array2;

    fn features(raw: &RawSignature) -> Array2<f64> {
        let sig = normalize_signature(raw).unwrap();
        let fs = centralize(&extract_time_functions(&sig).unwrap());
        assemble_input(&sig, &fs).unwrap().values
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticUserSpec::from_seed(42);
        let (g1, s1) = generate_user(&spec, 3, 3);
        let (g2, s2) = generate_user(&spec, 3, 3);
        assert_eq!(g1, g2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn generated_signatures_are_grammar_valid_and_desk_scale() {
        for seed in 0..10u64 {
            let spec = SyntheticUserSpec::from_seed(seed);
            let (genuine, skilled) = generate_user(&spec, 4, 4);
            for sig in genuine.iter().chain(&skilled) {
                sig.validate().unwrap();
                assert!(
                    (100..=400).contains(&sig.len()),
                    "seed {seed}: length {} out of range",
                    sig.len()
                );
                // feature extraction must succeed (no repeated timestamps)
                let _ = features(sig);
            }
        }
    }

    #[test]
    fn intra_user_distance_is_below_cross_user_distance() {
        let n_users = 10;
        let per_user = 3;
        let feats: Vec<Vec<Array2<f64>>> = (0..n_users)
            .map(|u| {
                let spec = SyntheticUserSpec::from_seed(1000 + u as u64);
                let (genuine, _) = generate_user(&spec, per_user, 0);
                genuine.iter().map(features).collect()
            })
            .collect();
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        for u in 0..n_users {
            for i in 0..per_user {
                for j in i + 1..per_user {
                    intra.push(dtw_distance(&feats[u][i], &feats[u][j]).normalized);
                }
                for v in u + 1..n_users {
                    inter.push(dtw_distance(&feats[u][i], &feats[v][0]).normalized);
                }
            }
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(
            mean(&intra) < mean(&inter),
            "intra {} should be below inter {}",
            mean(&intra),
            mean(&inter)
        );
    }

    #[test]
    fn distinct_seeds_give_distinct_base_curves() {
        let specs: Vec<SyntheticUserSpec> = (0..5).map(SyntheticUserSpec::from_seed).collect();
        for a in 0..5 {
            let (ga, _) = generate_user(&specs[a], 2, 0);
            let intra = dtw_distance(&features(&ga[0]), &features(&ga[1])).normalized;
            for b in a + 1..5 {
                let (gb, _) = generate_user(&specs[b], 1, 0);
                let cross = dtw_distance(&features(&ga[0]), &features(&gb[0])).normalized;
                assert!(
                    cross > intra,
                    "seeds {a}/{b}: cross {cross} not above intra {intra}"
                );
            }
        }
    }

    #[test]
    fn dataset_layout_counts_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(dir.path(), 1, 4, 4, 10).unwrap();
        assert_eq!(manifest.users.len(), 8);

        let mut csv_files = 0;
        for entry in walk(dir.path()) {
            if entry.extension().map(|e| e == "csv").unwrap_or(false) {
                csv_files += 1;
            }
        }
        assert_eq!(csv_files, 160);

        let ds = read_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(ds.users.len(), 8);
        assert_eq!(ds.train_users().len(), 4);
        assert_eq!(ds.test_users().len(), 4);
        for u in &ds.users {
            assert_eq!(u.genuine.len(), 10);
            assert_eq!(u.skilled.len(), 10);
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
        out
    }

    #[test]
    fn regeneration_reproduces_manifest_bytes() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(d1.path(), 7, 2, 2, 6).unwrap();
        generate_dataset(d2.path(), 7, 2, 2, 6).unwrap();
        let m1 = fs::read(d1.path().join("manifest.json")).unwrap();
        let m2 = fs::read(d2.path().join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
        // spot-check one capture file byte for byte
        let f1 = fs::read(d1.path().join("u000/s1/g00.csv")).unwrap();
        let f2 = fs::read(d2.path().join("u000/s1/g00.csv")).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn missing_file_is_reported_by_path() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 3, 1, 1, 6).unwrap();
        fs::remove_file(dir.path().join("u000/s1/g00.csv")).unwrap();
        let err = read_manifest(&dir.path().join("manifest.json")).unwrap_err();
        assert!(err.to_string().contains("g00.csv"), "{err}");
    }

    #[test]
    fn bad_stroke_state_is_reported_by_row() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 3, 1, 1, 6).unwrap();
        let victim = dir.path().join("u001/s2/f01.csv");
        let mut text = fs::read_to_string(&victim).unwrap();
        text = text.replacen(",1\n", ",3\n", 1);
        fs::write(&victim, text).unwrap();
        let err = read_manifest(&dir.path().join("manifest.json")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("f01.csv") && msg.contains("{0,1,2}"), "{msg}");
    }

    #[test]
    fn undersized_test_user_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 2, 1, 1, 4).unwrap(); // 4 < required 5
        let err = read_manifest(&dir.path().join("manifest.json")).unwrap_err();
        assert!(err.to_string().contains("test user"), "{err}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 5, 1, 1, 6).unwrap();
        let mpath = dir.path().join("manifest.json");
        let text = fs::read_to_string(&mpath).unwrap();
        let dup = text.replacen("\"sig_id\": \"g01\"", "\"sig_id\": \"g00\"", 1);
        fs::write(&mpath, dup).unwrap();
        let err = read_manifest(&mpath).unwrap_err();
        assert!(err.to_string().contains("duplicate signature id"), "{err}");
    }
}
