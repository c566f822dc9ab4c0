//! Persistent formats: episode NDJSON, single-column sample CSV, grid CSV.
//!
//! Episode files hold one JSON object per line. Every step is a
//! `"kind": "step"` line; each episode closes with a `"kind": "summary"` line
//! carrying its terminal metrics. Reals are written with 17 significant
//! digits so values round-trip exactly.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::dynamics::{Action, ChaserState, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::eval::{Episode, Heatmap, StepRecord};

pub const EPISODE_FORMAT_VERSION: u32 = 1;

fn real(out: &mut String, x: f64) {
    if x.is_finite() {
        let _ = write!(out, "{x:.16e}");
    } else {
        // JSON has no non-finite numbers; failed episodes may still hold one.
        out.push_str("null");
    }
}

fn reals(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, &x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        real(out, x);
    }
    out.push(']');
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialise")
}

/// Append the NDJSON lines of one episode to `out`.
pub fn episode_lines(e: &Episode, out: &mut String) {
    for r in &e.records {
        let _ = write!(out, "{{\"format_version\":{EPISODE_FORMAT_VERSION},\"kind\":\"step\",\"episode\":{},\"t\":{},\"dt\":", e.id, r.t);
        real(out, r.dt);
        out.push_str(",\"state\":");
        reals(out, &r.state.to_array());
        out.push_str(",\"action\":");
        reals(out, &r.action.to_array());
        if let Some(img) = &r.image_ref {
            let _ = write!(out, ",\"image_ref\":{}", json_str(img));
        }
        out.push_str("}\n");
    }
    let _ = write!(
        out,
        "{{\"format_version\":{EPISODE_FORMAT_VERSION},\"kind\":\"summary\",\"episode\":{},\"seed\":{},\"policy\":{},\"steps\":{},\"r_k\":",
        e.id,
        e.seed,
        json_str(&e.policy),
        e.records.len()
    );
    real(out, e.r_k());
    out.push_str(",\"v_k\":");
    real(out, e.v_k());
    out.push_str(",\"final_state\":");
    reals(out, &e.final_state.to_array());
    if let Some(f) = &e.failure {
        let _ = write!(out, ",\"failure\":{}", json_str(f));
    }
    out.push_str("}\n");
}

pub fn episodes_to_string(episodes: &[Episode]) -> String {
    let mut out = String::new();
    for e in episodes {
        episode_lines(e, &mut out);
    }
    out
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut buf = String::new();
    for e in episodes {
        buf.clear();
        episode_lines(e, &mut buf);
        w.write_all(buf.as_bytes()).map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Line {
    Step {
        format_version: u32,
        episode: u64,
        t: usize,
        dt: f64,
        state: Vec<Option<f64>>,
        action: Vec<Option<f64>>,
        #[serde(default)]
        image_ref: Option<String>,
    },
    Summary {
        format_version: u32,
        episode: u64,
        seed: u64,
        policy: String,
        steps: usize,
        r_k: Option<f64>,
        v_k: Option<f64>,
        final_state: Vec<Option<f64>>,
        #[serde(default)]
        failure: Option<String>,
    },
}

fn fixed<const N: usize>(xs: &[Option<f64>], what: &str) -> std::result::Result<[f64; N], String> {
    if xs.len() != N {
        return Err(format!("{what} has {} components, expected {N}", xs.len()));
    }
    Ok(std::array::from_fn(|i| xs[i].unwrap_or(f64::NAN)))
}

fn same(a: Option<f64>, b: f64) -> bool {
    match a {
        Some(a) => a.to_bits() == b.to_bits(),
        None => !b.is_finite(),
    }
}

/// Parse episode NDJSON. `origin` names the source in error messages.
pub fn parse_episodes(text: &str, origin: &str) -> Result<Vec<Episode>> {
    let perr = |line: usize, msg: String| Error::Parse { path: origin.to_string(), line, msg };
    let mut done = Vec::new();
    let mut open: Option<(u64, usize, Vec<StepRecord>)> = None;
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        last_line = n;
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(raw).map_err(|e| perr(n, e.to_string()))?;
        match line {
            Line::Step { format_version, episode, t, dt, state, action, image_ref } => {
                if format_version != EPISODE_FORMAT_VERSION {
                    return Err(perr(n, format!("unsupported format_version {format_version}")));
                }
                let state = ChaserState::from_array(&fixed::<STATE_DIM>(&state, "state").map_err(|m| perr(n, m))?);
                let action = Action::from_slice(&fixed::<ACTION_DIM>(&action, "action").map_err(|m| perr(n, m))?);
                let (id, _, records) = open.get_or_insert_with(|| (episode, n, Vec::new()));
                if *id != episode {
                    return Err(Error::Format(format!(
                        "{origin}: line {n}: step of episode {episode} while episode {id} has no summary yet"
                    )));
                }
                if t != records.len() {
                    return Err(Error::Format(format!(
                        "{origin}: line {n}: episode {episode} step t = {t}, expected {}",
                        records.len()
                    )));
                }
                records.push(StepRecord { t, dt, state, action, image_ref });
            }
            Line::Summary { format_version, episode, seed, policy, steps, r_k, v_k, final_state, failure } => {
                if format_version != EPISODE_FORMAT_VERSION {
                    return Err(perr(n, format!("unsupported format_version {format_version}")));
                }
                let final_state =
                    ChaserState::from_array(&fixed::<STATE_DIM>(&final_state, "final_state").map_err(|m| perr(n, m))?);
                let records = match open.take() {
                    Some((id, _, records)) if id == episode => records,
                    Some((id, start, _)) => {
                        return Err(Error::Format(format!(
                            "{origin}: line {n}: summary for episode {episode} closes steps of episode {id} (from line {start})"
                        )))
                    }
                    None => Vec::new(),
                };
                if records.len() != steps {
                    return Err(Error::Format(format!(
                        "{origin}: line {n}: episode {episode} summary declares {steps} steps, found {}",
                        records.len()
                    )));
                }
                let e = Episode { id: episode, seed, policy, records, final_state, failure };
                if !same(r_k, e.r_k()) || !same(v_k, e.v_k()) {
                    return Err(Error::Format(format!(
                        "{origin}: line {n}: terminal metrics disagree with the final state of episode {episode}"
                    )));
                }
                done.push(e);
            }
        }
    }
    if let Some((id, start, _)) = open {
        return Err(Error::Format(format!(
            "{origin}: episode {id} (from line {start}) has no summary line before end of file (line {last_line})"
        )));
    }
    Ok(done)
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_episodes(&text, &path.display().to_string())
}

/// Numbers from a single-column CSV. A non-numeric first row is taken as a
/// header.
pub fn read_sample_csv(path: &Path) -> Result<Vec<f64>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let cell = line.trim();
        if cell.is_empty() {
            continue;
        }
        if cell.contains(',') {
            return Err(Error::Parse { path: origin, line: i + 1, msg: "expected a single column".into() });
        }
        match cell.parse::<f64>() {
            Ok(x) if x.is_finite() => out.push(x),
            Ok(_) => return Err(Error::Parse { path: origin, line: i + 1, msg: format!("non-finite value '{cell}'") }),
            Err(_) if i == 0 => {}
            Err(e) => return Err(Error::Parse { path: origin, line: i + 1, msg: format!("'{cell}': {e}") }),
        }
    }
    Ok(out)
}

pub fn write_sample_csv(path: &Path, header: &str, values: &[f64]) -> Result<()> {
    let mut s = format!("{header}\n");
    for v in values {
        let _ = writeln!(s, "{v:.16e}");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_pairs_csv(path: &Path, header: [&str; 2], pairs: &[(f64, f64)]) -> Result<()> {
    let mut s = format!("{},{}\n", header[0], header[1]);
    for (a, b) in pairs {
        let _ = writeln!(s, "{a:.16e},{b:.16e}");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Count matrix, one CSV row per grid row (top row = smallest vertical bin).
pub fn write_heatmap_csv(path: &Path, map: &Heatmap) -> Result<()> {
    let mut s = String::new();
    for r in 0..map.rows {
        let row: Vec<String> = (0..map.cols).map(|c| map.get(r, c).to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::InitMode;
    use crate::eval::Scenario;
    use crate::expert::{generate_demos, ExpertConfig};

    const GOLDEN: &str = r#"{"format_version":1,"kind":"step","episode":3,"t":0,"dt":1.0,"state":[1.5,-20.25,0.125,0.0,0.01,-0.002,1.0,0.0,0.0,0.0,0.0,0.0,0.001],"action":[1.0,-2.0,0.5,0.0,0.0,-0.25]}
{"format_version":1,"kind":"step","episode":3,"t":1,"dt":0.9375,"state":[1.4,-20.0,0.1,-0.1,0.25,0.0,0.5,0.5,0.5,0.5,1e-3,-2e-3,3e-3],"action":[0.0,0.0,0.0,0.1,0.2,0.3],"image_ref":"ep3_t1.pgm"}
{"format_version":1,"kind":"summary","episode":3,"seed":7,"policy":"expert","steps":2,"r_k":5.0,"v_k":0.0,"final_state":[3.0,4.0,0.0,0.0,0.0,0.0,1.0,0.0,0.0,0.0,0.0,0.0,0.0]}
"#;

    #[test]
    fn golden_file_values() {
        let eps = parse_episodes(GOLDEN, "golden").unwrap();
        assert_eq!(eps.len(), 1);
        let e = &eps[0];
        assert_eq!((e.id, e.seed, e.policy.as_str(), e.len()), (3, 7, "expert", 2));
        let r0 = &e.records[0];
        assert_eq!(r0.dt, 1.0);
        assert_eq!(
            r0.state.to_array(),
            [1.5, -20.25, 0.125, 0.0, 0.01, -0.002, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.001]
        );
        assert_eq!(r0.action.to_array(), [1.0, -2.0, 0.5, 0.0, 0.0, -0.25]);
        let r1 = &e.records[1];
        assert_eq!(r1.dt, 0.9375);
        assert_eq!(r1.state.to_array()[10..], [1e-3, -2e-3, 3e-3]);
        assert_eq!(r1.image_ref.as_deref(), Some("ep3_t1.pgm"));
        assert_eq!(e.r_k(), 5.0);
        assert_eq!(e.failure, None);
    }

    #[test]
    fn generated_dataset_round_trips_bit_exactly() {
        let eps = generate_demos(4, InitMode::Random, 3, &ExpertConfig::default(), &Scenario::default()).unwrap();
        let text = episodes_to_string(&eps);
        let back = parse_episodes(&text, "mem").unwrap();
        assert_eq!(back, eps);
        assert_eq!(episodes_to_string(&back), text);
        for line in text.lines().take(3) {
            // Every real carries 17 significant digits.
            assert!(line.contains("e"), "{line}");
        }
    }

    #[test]
    fn failed_episode_with_non_finite_state_survives() {
        let mut eps = generate_demos(1, InitMode::Same, 3, &ExpertConfig::default(), &Scenario::default()).unwrap();
        eps[0].final_state.v.x = f64::NAN;
        eps[0].failure = Some("step 9: \"boom\"".into());
        let back = parse_episodes(&episodes_to_string(&eps), "mem").unwrap();
        assert!(back[0].final_state.v.x.is_nan());
        assert_eq!(back[0].failure, eps[0].failure);
    }

    #[test]
    fn truncated_line_is_localised() {
        let eps = generate_demos(1, InitMode::Same, 3, &ExpertConfig::default(), &Scenario::default()).unwrap();
        let text = episodes_to_string(&eps);
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        assert!(lines.len() > 42);
        let cut = lines[41].len() / 2;
        lines[41].truncate(cut);
        match parse_episodes(&lines.join("\n"), "demos.ndjson") {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 42);
                assert_eq!(path, "demos.ndjson");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ordering_violations_are_format_errors() {
        let lines: Vec<&str> = GOLDEN.lines().collect();
        let swapped = [lines[1], lines[0], lines[2]].join("\n");
        assert!(matches!(parse_episodes(&swapped, "x"), Err(Error::Format(_))));
        let unterminated = lines[..2].join("\n");
        assert!(matches!(parse_episodes(&unterminated, "x"), Err(Error::Format(_))));
        let other_episode = lines[1].replace("\"episode\":3", "\"episode\":4");
        let mixed = [lines[0], &other_episode, lines[2]].join("\n");
        assert!(matches!(parse_episodes(&mixed, "x"), Err(Error::Format(_))));
        let wrong_metric = lines[2].replace("\"r_k\":5.0", "\"r_k\":5.5");
        let bad = [lines[0], lines[1], &wrong_metric].join("\n");
        assert!(matches!(parse_episodes(&bad, "x"), Err(Error::Format(_))));
    }

    #[test]
    fn bad_versions_and_shapes_are_parse_errors() {
        let lines: Vec<&str> = GOLDEN.lines().collect();
        let v2 = lines[0].replace("\"format_version\":1", "\"format_version\":2");
        assert!(matches!(parse_episodes(&v2, "x"), Err(Error::Parse { line: 1, .. })));
        let short = lines[0].replace("[1.0,-2.0,0.5,0.0,0.0,-0.25]", "[1.0]");
        assert!(matches!(parse_episodes(&short, "x"), Err(Error::Parse { line: 1, .. })));
        let extra = lines[0].replace("\"dt\"", "\"bogus\":1,\"dt\"");
        assert!(matches!(parse_episodes(&extra, "x"), Err(Error::Parse { .. })));
    }

    #[test]
    fn sample_csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let xs = [0.1, 1.0 / 3.0, -2.5e-7];
        write_sample_csv(&p, "smoothness", &xs).unwrap();
        assert_eq!(read_sample_csv(&p).unwrap(), xs);
        std::fs::write(&p, "1.5\n2.5\n\n").unwrap();
        assert_eq!(read_sample_csv(&p).unwrap(), [1.5, 2.5]);
        std::fs::write(&p, "x\n1\nfoo\n").unwrap();
        assert!(matches!(read_sample_csv(&p), Err(Error::Parse { line: 3, .. })));
        std::fs::write(&p, "1,2\n").unwrap();
        assert!(read_sample_csv(&p).is_err());
    }

    #[test]
    fn file_round_trip() {
        let eps = generate_demos(2, InitMode::Same, 5, &ExpertConfig::default(), &Scenario::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ndjson");
        write_episodes(&p, &eps).unwrap();
        assert_eq!(read_episodes(&p).unwrap(), eps);
        assert!(matches!(read_episodes(&dir.path().join("missing.ndjson")), Err(Error::Io { .. })));
    }
}
