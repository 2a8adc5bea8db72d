//! Run directory layout:
//!
//! ```text
//! scenario.toml        the scenario as run
//! metrics.csv          one row, header METRICS_HEADER
//! adoption.csv         adoption sensitivity curve, when requested
//! summary.txt          human-readable digest
//! network.jsonl        every message that crossed the simulated network
//! diagnosis_log.jsonl  every diagnosis attempt, with consent and bytes sent
//! agents/agent-NNN/    day files, known.bin and installation_id per device
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::{AdoptionPoint, Metrics, World};
use crate::dayfile;
use crate::wire::installation_id_to_string;

pub const METRICS_HEADER: &str = "seed,agents,adopters,adoption,diagnosed,ctas_published,truly_exposed,exposed_alerted,recall,exposed_tcn_alerted,tcn_recall,alerted,clean_agents,false_alarms,false_alarm_rate,tcn_overclaims,diagnosis_uploads,stats_uploads,messages";

fn io_err(e: impl std::fmt::Display) -> io::Error {
    io::Error::other(e.to_string())
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    for r in rows {
        w.serialize(r).map_err(io_err)?;
    }
    w.flush()
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut f, it).map_err(io_err)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

pub fn summary(m: &Metrics, curve: &[AdoptionPoint]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed {}  agents {}  adopters {} ({:.0}%)", m.seed, m.agents, m.adopters, m.adoption * 100.0);
    let _ = writeln!(s, "diagnosed {}  CTAs published {}", m.diagnosed, m.ctas_published);
    let _ = writeln!(
        s,
        "truly exposed {}  alerted {}  recall {:.3}  TCN recall {:.3}",
        m.truly_exposed, m.exposed_alerted, m.recall, m.tcn_recall
    );
    let _ = writeln!(
        s,
        "alerts {}  clean agents {}  false alarms {}  rate {:.3}  TCN over-claims {}",
        m.alerted, m.clean_agents, m.false_alarms, m.false_alarm_rate, m.tcn_overclaims
    );
    let _ = writeln!(
        s,
        "messages {}  stats uploads {}  diagnosis uploads {}",
        m.messages, m.stats_uploads, m.diagnosis_uploads
    );
    if !curve.is_empty() {
        let _ = writeln!(s, "adoption curve:");
        for p in curve {
            let _ = writeln!(s, "  {:>5.2}  recall {:.3}  alerted {}", p.adoption, p.recall, p.alerted);
        }
    }
    s
}

pub fn write_run_dir(dir: &Path, world: &World, metrics: &Metrics, curve: &[AdoptionPoint]) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("scenario.toml"), world.scenario.to_toml())?;
    write_csv(&dir.join("metrics.csv"), std::slice::from_ref(metrics))?;
    if !curve.is_empty() {
        write_csv(&dir.join("adoption.csv"), curve)?;
    }
    fs::write(dir.join("summary.txt"), summary(metrics, curve))?;
    write_jsonl(&dir.join("network.jsonl"), world.network.log())?;
    write_jsonl(&dir.join("diagnosis_log.jsonl"), &world.diagnosis_log)?;
    let agents_dir = dir.join("agents");
    for a in &world.agents {
        let Some(dev) = &a.device else { continue };
        let d = agents_dir.join(&a.label);
        dayfile::write_device_dir(&d, &dev.data).map_err(io_err)?;
        fs::write(d.join("installation_id"), installation_id_to_string(dev.installation_id()) + "\n")?;
    }
    Ok(())
}
