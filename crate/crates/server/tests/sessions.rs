mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use serde_json::Value;

use vfm_api::{Answers, AnswersAccepted, SessionCreated};
use vfm_client::{read_log, replay, Client};
use vfm_server::{RequestLog, ServerConfig};

use common::*;

#[derive(Debug, Clone, Copy)]
enum Op {
    AnswerAll,
    AnswerOne,
    Confidence,
    Risk,
    Show,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => Just(Op::AnswerAll),
        2 => Just(Op::AnswerOne),
        1 => Just(Op::Confidence),
        1 => Just(Op::Risk),
        1 => Just(Op::Show),
    ]
}

/// Client-side view of one session.
struct Script {
    id: String,
    user: usize,
    pending: Vec<usize>,
    seen: Vec<(u16, Value)>,
}

fn strip_created(v: &mut Value) {
    if let Value::Object(map) = v {
        map.remove("created");
    }
}

impl Script {
    async fn open(c: &Client, strategy: &str, user: usize) -> Script {
        let created: SessionCreated = c.create_session(strategy, None).await.unwrap();
        Script {
            id: created.session_id,
            user,
            pending: created.first_queries.iter().map(|q| q.item).collect(),
            seen: Vec::new(),
        }
    }

    async fn step(&mut self, c: &Client, op: Op) {
        let (method, uri, body) = match op {
            Op::AnswerAll | Op::AnswerOne => {
                let n = if matches!(op, Op::AnswerOne) {
                    1
                } else {
                    self.pending.len()
                };
                let answers: Answers = self.pending[..n.min(self.pending.len())]
                    .iter()
                    .map(|&j| (j, matrix().get(self.user, j) == 1))
                    .collect();
                let body = serde_json::to_string(&answers).unwrap();
                ("POST", format!("/sessions/{}/answers", self.id), body)
            }
            Op::Confidence => (
                "GET",
                format!("/sessions/{}/predictions?sort=confidence", self.id),
                String::new(),
            ),
            Op::Risk => (
                "GET",
                format!("/sessions/{}/predictions?sort=risk", self.id),
                String::new(),
            ),
            Op::Show => ("GET", format!("/sessions/{}", self.id), String::new()),
        };
        let (status, mut value) = c.send_raw(method, &uri, &body).await.unwrap();
        if status == 200 && method == "POST" {
            let accepted: AnswersAccepted = serde_json::from_value(value.clone()).unwrap();
            self.pending = accepted.next_queries.iter().map(|q| q.item).collect();
        }
        strip_created(&mut value);
        self.seen.push((status, value));
    }
}

fn quick() -> ServerConfig {
    config(20)
}

/// Opens two sessions, then applies their scripts in the given order
/// (`false` picks the first session).
async fn interleaved(a: &[Op], b: &[Op], order: &[bool]) -> (Vec<(u16, Value)>, Vec<(u16, Value)>) {
    let server = start(catalog(), quick(), None).await;
    let c = &server.client;
    let mut s = [Script::open(c, "variance", 81).await, Script::open(c, "mean", 82).await];
    let (mut ia, mut ib) = (0, 0);
    for &second in order {
        if second {
            s[1].step(c, b[ib]).await;
            ib += 1;
        } else {
            s[0].step(c, a[ia]).await;
            ia += 1;
        }
    }
    let [x, y] = s;
    (x.seen, y.seen)
}

fn interleavings() -> impl Strategy<Value = (Vec<Op>, Vec<Op>, Vec<bool>)> {
    (prop::collection::vec(op(), 1..4), prop::collection::vec(op(), 1..4)).prop_flat_map(|(a, b)| {
        let order: Vec<bool> = a.iter().map(|_| false).chain(b.iter().map(|_| true)).collect();
        (Just(a), Just(b), Just(order).prop_shuffle())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn sessions_do_not_affect_each_other((a, b, order) in interleavings()) {
        let rt = tokio::runtime::Runtime::new().unwrap();
        let sequential: Vec<bool> = a.iter().map(|_| false).chain(b.iter().map(|_| true)).collect();
        let (ra, rb) = rt.block_on(interleaved(&a, &b, &sequential));
        let (xa, xb) = rt.block_on(interleaved(&a, &b, &order));
        prop_assert_eq!(ra, xa);
        prop_assert_eq!(rb, xb);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_match_sequential_ones() {
    let a = [Op::AnswerAll, Op::Risk, Op::AnswerOne, Op::AnswerAll, Op::Show];
    let b = [Op::AnswerOne, Op::AnswerAll, Op::Confidence, Op::AnswerAll];
    let sequential: Vec<bool> = a.iter().map(|_| false).chain(b.iter().map(|_| true)).collect();
    let (ra, rb) = interleaved(&a, &b, &sequential).await;

    let server = start(catalog(), quick(), None).await;
    let c = server.client.clone();
    let mut x = Script::open(&c, "variance", 81).await;
    let mut y = Script::open(&c, "mean", 82).await;
    let (c1, c2) = (c.clone(), c.clone());
    let ta = tokio::spawn(async move {
        for op in a {
            x.step(&c1, op).await;
        }
        x.seen
    });
    let tb = tokio::spawn(async move {
        for op in b {
            y.step(&c2, op).await;
        }
        y.seen
    });
    assert_eq!(ta.await.unwrap(), ra);
    assert_eq!(tb.await.unwrap(), rb);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_answers_to_one_session_are_serialized() {
    let server = start(catalog(), quick(), None).await;
    let created = server.client.create_session("variance", None).await.unwrap();
    let id = created.session_id.clone();
    let pending: Vec<usize> = created.first_queries.iter().map(|q| q.item).collect();
    let user = 83;

    let tasks: Vec<_> = pending
        .iter()
        .map(|&j| {
            let (c, id) = (server.client.clone(), id.clone());
            let answers: Answers = [(j, matrix().get(user, j) == 1)].into_iter().collect();
            tokio::spawn(async move { (j, c.answer(&id, &answers).await.unwrap()) })
        })
        .collect();
    let mut results = Vec::new();
    for t in tasks {
        results.push(t.await.unwrap());
    }
    // every request saw a distinct number of earlier answers
    let counts: BTreeSet<usize> = results.iter().map(|(_, r)| r.summary.answered).collect();
    assert_eq!(counts, (1..=4).collect());
    results.sort_by_key(|(_, r)| r.summary.answered);
    let order: Vec<usize> = results.iter().map(|(j, _)| *j).collect();
    let info = server.client.session(&id).await.unwrap();
    let answered: Vec<usize> = info.answered.iter().map(|a| a.item).collect();
    assert_eq!(answered, order);
    assert_eq!(info.pending.len(), 4);

    // the same answers one at a time in that order give the same posterior
    let fresh = start(catalog(), quick(), None).await;
    let again = fresh.client.create_session("variance", None).await.unwrap();
    assert_eq!(again.session_id, id);
    let mut last = None;
    for &j in &order {
        let answers: Answers = [(j, matrix().get(user, j) == 1)].into_iter().collect();
        last = Some(fresh.client.answer(&id, &answers).await.unwrap());
    }
    assert_eq!(last.unwrap(), results.pop().unwrap().1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn duplicate_concurrent_answers_apply_once() {
    let server = start(catalog(), quick(), None).await;
    let created = server.client.create_session("random", None).await.unwrap();
    let j = created.first_queries[0].item;
    let tasks: Vec<_> = (0..4)
        .map(|_| {
            let (c, id) = (server.client.clone(), created.session_id.clone());
            tokio::spawn(async move {
                let answers: Answers = [(j, true)].into_iter().collect();
                c.answer(&id, &answers).await.map_err(|e| e.status())
            })
        })
        .collect();
    let mut ok = 0;
    for t in tasks {
        match t.await.unwrap() {
            Ok(_) => ok += 1,
            Err(status) => assert_eq!(status, Some(409)),
        }
    }
    assert_eq!(ok, 1);
    let info = server.client.session(&created.session_id).await.unwrap();
    assert_eq!(info.answered.len(), 1);
}

async fn logged_traffic(c: &Client) {
    let a = Script::open(c, "variance", 84).await;
    let b = Script::open(c, "random", 85).await;
    let ops = [
        Op::AnswerOne,
        Op::AnswerAll,
        Op::Confidence,
        Op::AnswerAll,
        Op::Risk,
        Op::Show,
    ];
    // two sessions driven concurrently
    let (c1, c2) = (c.clone(), c.clone());
    let ta = tokio::spawn(async move {
        let mut a = a;
        for op in ops {
            a.step(&c1, op).await;
        }
    });
    let tb = tokio::spawn(async move {
        let mut b = b;
        for op in ops.iter().rev() {
            b.step(&c2, *op).await;
        }
    });
    ta.await.unwrap();
    tb.await.unwrap();
    for (method, uri, body) in [
        ("POST", "/sessions", r#"{"strategy":"nope"}"#),
        ("GET", "/sessions/missing", ""),
        ("POST", "/sessions/s1-0/answers", r#"{"1":true}"#),
        ("POST", "/sessions", r#"{"strategy":"mean","batch_size":3}"#),
    ] {
        c.send_raw(method, uri, body).await.unwrap();
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn replaying_the_request_log_reproduces_every_response() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("requests.jsonl");
    let cfg = ServerConfig { seed: 7, ..quick() };
    {
        let log = RequestLog::create(&path).unwrap();
        let server = start(catalog(), cfg.clone(), Some(log)).await;
        logged_traffic(&server.client).await;
    }
    let records = read_log(&path).unwrap();
    assert_eq!(records.len(), 2 + 2 * 6 + 4);
    let seqs: Vec<u64> = records.iter().map(|r| r.seq).collect();
    assert_eq!(seqs, (1..=records.len() as u64).collect::<Vec<_>>());
    let statuses: BTreeSet<u16> = records.iter().map(|r| r.status).collect();
    assert!(statuses.is_superset(&[200, 201, 400, 404].into()), "{statuses:?}");

    let fresh = start(catalog(), cfg.clone(), None).await;
    let report = replay(&fresh.client, &records).await.unwrap();
    assert_eq!(report.requests, records.len());
    assert!(report.mismatches.is_empty(), "{:#?}", report.mismatches.first());

    // a server with another root seed disagrees
    let other = start(catalog(), ServerConfig { seed: 8, ..cfg }, None).await;
    let report = replay(&other.client, &records).await.unwrap();
    assert!(!report.mismatches.is_empty());
}
