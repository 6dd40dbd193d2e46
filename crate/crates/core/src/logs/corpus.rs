//! Seeded synthetic log corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EventKind, LogEvent, LogFormat, GIB};

pub const DEFAULT_SEED: u64 = 0x5eed;
pub const DEFAULT_EVENTS: usize = 100_000;

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub seed: u64,
    pub events: usize,
    pub start_ts: i64,
    /// Mean gap between consecutive events.
    pub step_us: i64,
    pub users: usize,
    pub apps: usize,
    pub hosts: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: DEFAULT_SEED,
            events: DEFAULT_EVENTS,
            start_ts: 1_700_000_000_000_000,
            step_us: 1_000_000,
            users: 50,
            apps: 20,
            hosts: 8,
        }
    }
}

/// Events in strictly increasing `ts` order, so natural keys never collide.
/// Values are whole numbers, which keeps sums exact in any order.
pub fn generate(spec: &CorpusSpec) -> Vec<LogEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ts = spec.start_ts;
    (0..spec.events)
        .map(|_| {
            ts += rng.gen_range(1..=spec.step_us.max(1) * 2);
            let u = rng.gen_range(0..spec.users.max(1));
            let user = format!("u{u:03}");
            let app = format!("app{:02}", rng.gen_range(0..spec.apps.max(1)));
            let host = format!("h{}", rng.gen_range(0..spec.hosts.max(1)));
            let (kind, object, value) = match rng.gen_range(0..10) {
                0..=3 => {
                    let size = if rng.gen_bool(0.02) {
                        rng.gen_range(GIB as u64..(8.0 * GIB) as u64)
                    } else {
                        rng.gen_range(0..50_000_000)
                    };
                    (EventKind::FileTouch, format!("/home/{user}/f{}", rng.gen_range(0..200)), size as f64)
                }
                4..=5 => (
                    EventKind::FolderSize,
                    format!("/home/{user}/d{}", rng.gen_range(0..30)),
                    rng.gen_range(0..10_000_000_000u64) as f64,
                ),
                6..=7 => (EventKind::CpuSample, format!("pid{}", rng.gen_range(1..5000)), rng.gen_range(0..1_000_000_000u64) as f64),
                _ => (EventKind::NetSample, format!("{}:{}", host, rng.gen_range(1024..65535)), rng.gen_range(0..10_000_000u64) as f64),
            };
            LogEvent { ts, host, user, app, kind, object, value }
        })
        .collect()
}

/// Renders events as file contents; csv output starts with the header.
pub fn render(events: &[LogEvent], format: LogFormat) -> String {
    let mut out = String::new();
    if format == LogFormat::Csv {
        out.push_str(super::CSV_HEADER);
        out.push('\n');
    }
    for e in events {
        out.push_str(&match format {
            LogFormat::Jsonl => e.to_json_line(),
            LogFormat::Csv => e.to_csv_line(),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = CorpusSpec { events: 500, ..Default::default() };
        assert_eq!(generate(&spec), generate(&spec));
        let ts: Vec<i64> = generate(&spec).iter().map(|e| e.ts).collect();
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
    }
}
