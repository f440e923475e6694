//! Synthetic demo material: a small forum corpus and a deterministic
//! keyword-driven "analyst" that stands in for the model when recording
//! demo transcripts.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use chrono::{Duration as Days, TimeZone, Utc};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{
    BackendError, BackendKind, CompletionBackend, CompletionRequest, CompletionResult,
    MemoryTranscripts, RecordingBackend,
};
use crate::corpus::{Corpus, Message, Thread};
use crate::pipeline::{run, BackendMode, PipelineError, RunConfig};
use crate::schema::{default_schema, REPAIR_SUFFIX};
use crate::store::Store;
use crate::timefmt;

pub const DEMO_SEED: u64 = 20230301;
pub const DEMO_THREADS: usize = 20;

/// Phrase that makes the analyst answer in prose until asked to repair.
pub const RAMBLE_MARKER: &str = "long story short";

struct Theme {
    forum: &'static str,
    title: &'static str,
    lines: &'static [&'static str],
}

const THEMES: &[Theme] = &[
    Theme {
        forum: "access-market",
        title: "Selling VPN access to US bank, revenue $2B",
        lines: &[
            "WTS Fortinet VPN access to a US bank, revenue $2B, domain admin included.",
            "Price is 5k, escrow accepted.",
            "Is the access still valid? Need proof first.",
            "Screenshots sent in PM. Finance sector, 3000 employees.",
            "Bought, access works. Legit seller.",
        ],
    },
    Theme {
        forum: "exploit-lab",
        title: "Citrix ADC RCE proof of concept",
        lines: &[
            "New RCE in Citrix ADC, works remotely without auth.",
            "Already exploited in the wild, saw it in a few incident reports.",
            "Does the PoC work on patched builds?",
            "Only on builds before the March patch.",
            "Sharing the PoC for free, use it wisely.",
        ],
    },
    Theme {
        forum: "politics",
        title: "Hitting energy companies over the sanctions",
        lines: &[
            "Time to go after energy companies that support the sanctions against Russia.",
            "The power grid operators are poorly protected.",
            "This is about Ukraine, not money.",
            "Anyone with SCADA experience?",
        ],
    },
    Theme {
        forum: "access-market",
        title: "Hospital network RDP for sale",
        lines: &[
            "Selling RDP access to a hospital network in Europe.",
            "Price negotiable, healthcare targets pay fast.",
            "How many hosts?",
            "Around 400 endpoints, Windows servers.",
        ],
    },
    Theme {
        forum: "general",
        title: "Best bulletproof VPS provider?",
        lines: &[
            "Looking for a reliable VPS provider that ignores abuse reports.",
            "I have used a few, most go down after a month.",
            "Thanks for the tips.",
            "Check the pinned thread.",
        ],
    },
    Theme {
        forum: "malware",
        title: "Chrome stealer builder, Windows 10 and 11",
        lines: &[
            "Selling a stealer builder that grabs Chrome cookies on Windows 10 and 11.",
            "Price 300 monthly.",
            "Does it bypass Defender?",
            "Yes, FUD as of today.",
        ],
    },
    Theme {
        forum: "exploit-lab",
        title: "Exchange server bug discussion",
        lines: &[
            "Microsoft Exchange bug allows remote code execution, affects Fortune 500 companies.",
            "Actively exploited by several groups right now.",
            "Any public scanner for it?",
            "Not yet, writing one.",
        ],
    },
    Theme {
        forum: "general",
        title: "Introduce yourself",
        lines: &[
            "Hi all, new here.",
            "Welcome, read the rules.",
            "Glad to be here.",
        ],
    },
];

const AUTHORS: &[&str] = &[
    "ghost", "n1ghtcrawler", "bytebandit", "vx_dealer", "rootkit_rick", "ssh_sam", "zeroday_zoe",
];

/// The demo corpus: `DEMO_THREADS` threads over one to four days each.
pub fn demo_corpus() -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(DEMO_SEED);
    let start = Utc.with_ymd_and_hms(2023, 3, 1, 0, 0, 0).unwrap();
    let mut threads = Vec::new();
    for t in 0..DEMO_THREADS {
        let theme = &THEMES[t % THEMES.len()];
        let thread_id = format!("t-{:03}", t + 1);
        let first_day = start + Days::days(rng.random_range(0..30));
        let days = if t == 3 { rng.random_range(2..=4) } else { rng.random_range(1..=4) };
        let mut messages = Vec::new();
        for d in 0..days {
            let per_day = rng.random_range(2..=4);
            for i in 0..per_day {
                let mut body = theme.lines.choose(&mut rng).expect("theme has lines").to_string();
                // One batch in the corpus exercises the repair path.
                if t == 3 && d == 1 && i == 0 {
                    body = format!("{RAMBLE_MARKER}, {body}");
                }
                let at = first_day
                    + Days::days(d)
                    + Days::hours(rng.random_range(0..24))
                    + Days::minutes(rng.random_range(0..60));
                messages.push(Message {
                    message_id: format!("m-{:03}-{:03}", t + 1, messages.len() + 1),
                    thread_id: thread_id.clone(),
                    author: AUTHORS.choose(&mut rng).expect("authors").to_string(),
                    posted_at: at,
                    body,
                });
            }
        }
        threads.push(Thread::new(thread_id, theme.forum, theme.title, messages));
    }
    Corpus::from_threads(threads)
}

pub const DEMO_RECORDED_AT: &str = "2023-06-01T00:00:00Z";

/// Fixture files for the demo: the corpus and the transcripts of a full
/// recorded run with [`DemoAnalyst`], both as newline-delimited JSON.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoFixtures {
    pub corpus_jsonl: String,
    pub transcripts_jsonl: String,
}

/// Renders the demo fixtures. `scratch` must be an empty directory; the
/// recording run uses it as a throwaway store.
pub fn render_fixtures(scratch: &Path) -> Result<DemoFixtures, PipelineError> {
    let corpus = demo_corpus();
    let schema = default_schema();
    let sink = Arc::new(MemoryTranscripts::default());
    let backend = RecordingBackend::new(DemoAnalyst, sink.clone());
    let store = Store::init(scratch)?;
    let config = RunConfig {
        backend_mode: BackendMode::Record,
        ..RunConfig::default()
    };
    run(&corpus, &schema, &backend, &store, &config)?;

    let recorded_at = timefmt::parse(DEMO_RECORDED_AT).expect("valid timestamp");
    let mut entries = sink.entries();
    entries.sort_by(|a, b| a.fingerprint.cmp(&b.fingerprint));
    let mut transcripts_jsonl = String::new();
    for mut e in entries {
        e.recorded_at = recorded_at;
        transcripts_jsonl.push_str(&serde_json::to_string(&e).expect("entry serializes"));
        transcripts_jsonl.push('\n');
    }
    let mut corpus_jsonl = String::new();
    for r in corpus.to_records() {
        corpus_jsonl.push_str(&serde_json::to_string(&r).expect("record serializes"));
        corpus_jsonl.push('\n');
    }
    Ok(DemoFixtures {
        corpus_jsonl,
        transcripts_jsonl,
    })
}

/// Deterministic stand-in for the model: reads the conversation out of the
/// prompt and codes it by keyword.
#[derive(Debug, Clone, Copy, Default)]
pub struct DemoAnalyst;

fn section<'a>(text: &'a str, start: &str, end: &str) -> &'a str {
    let from = text.find(start).map(|i| i + start.len()).unwrap_or(0);
    let rest = &text[from..];
    &rest[..rest.find(end).unwrap_or(rest.len())]
}

fn any(text: &str, words: &[&str]) -> bool {
    words.iter().any(|w| text.contains(w))
}

impl DemoAnalyst {
    pub fn answer(&self, user_text: &str) -> String {
        let title = section(user_text, "Thread title: ", "\n").trim();
        let convo = section(user_text, "Conversation of ", "\nPlease extract");
        let lines: Vec<&str> = convo.lines().skip(1).filter(|l| l.starts_with('[')).collect();
        if convo.contains(RAMBLE_MARKER) && !user_text.ends_with(REPAIR_SUFFIX) {
            return "Sure. Long story short, the actors were negotiating a deal and \
                    everyone seemed satisfied with the outcome."
                .to_string();
        }
        let bodies: Vec<&str> = lines
            .iter()
            .filter_map(|l| l.split_once("] ").map(|(_, rest)| rest))
            .collect();
        let authors: BTreeSet<&str> = bodies
            .iter()
            .filter_map(|b| b.split_once(": ").map(|(a, _)| a))
            .collect();
        let text = format!("{title} {}", bodies.join(" ")).to_lowercase();

        let techs: Vec<&str> = [
            ("fortinet", "Fortinet VPN"),
            ("citrix", "Citrix ADC"),
            ("rdp", "RDP"),
            ("exchange", "Microsoft Exchange"),
            ("chrome", "Google Chrome"),
            ("windows", "Windows"),
            ("scada", "SCADA"),
        ]
        .iter()
        .filter(|(k, _)| text.contains(k))
        .map(|(_, v)| *v)
        .collect();
        let mut industries: Vec<&str> = Vec::new();
        if any(&text, &["bank", "finance"]) {
            industries.push("Finance");
        }
        if any(&text, &["energy", "power grid", "scada"]) {
            industries.push("Critical Infrastructure");
        }
        if any(&text, &["hospital", "healthcare"]) {
            industries.push("Healthcare");
        }

        let first = bodies
            .first()
            .and_then(|b| b.split_once(": ").map(|(_, m)| m))
            .unwrap_or("");
        let summary = format!(
            "In \"{title}\", {} participant(s) posted {} message(s). It opened with: {first}",
            authors.len(),
            bodies.len()
        );
        let doc = serde_json::json!({
            "summary": summary,
            "variables": {
                "is_sale": any(&text, &["selling", "wts", "price", "for sale"]),
                "is_initial_access": any(&text, &["access", "rdp", "domain admin"]),
                "is_targeting_mainstream": any(&text, &["windows", "chrome", "microsoft"]),
                "is_targeting_large_organization": any(&text, &["revenue", "fortune 500", "3000 employees"]),
                "is_targeting_critical_infrastructure": any(&text, &["energy", "power grid", "hospital", "scada"]),
                "is_remotely_exploitable": any(&text, &["rce", "remote", "rdp", "vpn"]),
                "is_actively_exploitable": any(&text, &["in the wild", "actively exploited"]),
                "is_geopolitics": any(&text, &["sanctions", "russia", "ukraine"]),
                "targeted_technologies": techs.join(", "),
                "industries": industries,
            }
        });
        serde_json::to_string_pretty(&doc).expect("json serializes")
    }
}

impl CompletionBackend for DemoAnalyst {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        req.validate()?;
        Ok(CompletionResult {
            raw_text: self.answer(&req.user_text),
            latency: Duration::ZERO,
            usage: None,
            backend_kind: BackendKind::Live,
            retries: 0,
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::chunk_daily;
    use crate::schema::{build_prompt, parse_response, PromptConfig, PromptContext};

    #[test]
    fn corpus_shape_is_stable() {
        let c = demo_corpus();
        assert_eq!(c.thread_count(), DEMO_THREADS);
        assert_eq!(c, demo_corpus());
        let batches = c.daily_batches().len();
        assert!(batches > DEMO_THREADS, "{batches} batches");
    }

    #[test]
    fn analyst_answers_parse() {
        let c = demo_corpus();
        let schema = default_schema();
        let t = c.thread("t-001").unwrap();
        let batch = chunk_daily(t).remove(0);
        let ctx = PromptContext {
            thread_title: Some(t.title.clone()),
            prior_summary: None,
            batch_index: 0,
        };
        let p = build_prompt(&schema, &ctx, &batch, &PromptConfig::default()).unwrap();
        let parsed = parse_response(&DemoAnalyst.answer(&p.user_text), &schema).unwrap();
        assert!(parsed.summary.contains("Selling VPN access"));
        assert_eq!(parsed.values["industries"].as_list().unwrap(), ["Finance"]);
    }
}
