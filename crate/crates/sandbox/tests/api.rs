use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use futures::StreamExt;
use hrc_core::policy::GreedyPolicy;
use hrc_core::{chair, ActionId, ScenarioConfig};
use hrc_sandbox::{replay, router, AppState, Choice, Frame, ServerConfig, Session, SessionError, Status};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

fn app() -> Router {
    router(AppState::new(ServerConfig { train_episodes: 2_000, ..Default::default() }))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    // Extractor rejections come back as plain text.
    let v = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, v)
}

fn deterministic() -> Value {
    serde_json::to_value(ScenarioConfig::deterministic()).unwrap()
}

/// A robot-only action long enough that the human can pick the joint action while the robot
/// is still busy.
fn joint_task() -> Value {
    json!({
        "actions": [
            {"id": 1, "capability": "robot_only", "duration_r": 20},
            {"id": 2, "capability": "human_only", "duration_h": 6},
            {"id": 3, "capability": "joint", "duration_h": 5},
        ],
        "root": {"kind": "independent", "children": [
            {"leaf": 1},
            {"kind": "sequential", "children": [{"leaf": 2}, {"leaf": 3}]},
        ]},
    })
}

fn frames(v: &Value) -> Vec<Frame> {
    serde_json::from_value(v["frames"].clone()).unwrap()
}

/// Lowest feasible action, idle when nothing else is offered, and continue at checkpoints.
fn scripted(f: &Frame) -> Choice {
    match f.status {
        Status::AwaitingHumanChoice => match f.feasible_human.iter().find(|&&a| a != 0) {
            Some(&a) => Choice::Action { action_id: a },
            None => Choice::Idle,
        },
        _ => Choice::Continue,
    }
}

async fn play(app: &Router, id: &str, first: Frame) -> Vec<Frame> {
    let mut all = vec![first];
    while !all.last().unwrap().done {
        let choice = scripted(all.last().unwrap());
        let (st, v) = call(app, "POST", &format!("/sessions/{id}/choice"), Some(serde_json::to_value(choice).unwrap())).await;
        assert_eq!(st, StatusCode::OK, "{v}");
        all.extend(frames(&v));
        assert!(all.len() < 10_000);
    }
    all
}

#[tokio::test]
async fn chair_session_offers_rails_and_idle() {
    let app = app();
    let (st, v) = call(&app, "POST", "/sessions", Some(json!({"htm": "chair", "policy": "rl", "seed": 3}))).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    assert_eq!(v["status"], "awaiting_human_choice");
    let f: Frame = serde_json::from_value(v["frame"].clone()).unwrap();
    assert_eq!(f.feasible_human, vec![0, 1, 2, 3, 4]);
    assert_eq!(f.seq, 0);
    assert_eq!(f.s_a, vec![0; 10]);
    assert!(f.belief.is_none());
}

#[tokio::test]
async fn bad_references_create_nothing() {
    let app = app();
    for body in [
        json!({"htm": "chair", "policy": "telepathy"}),
        json!({"htm": "sofa", "policy": "greedy"}),
        json!({"htm": "random:7:0", "policy": "greedy"}),
        // Default scenario has duration noise, which the graph planner refuses.
        json!({"htm": "chair", "policy": "graph"}),
    ] {
        let (st, v) = call(&app, "POST", "/sessions", Some(body)).await;
        assert_eq!(st, StatusCode::BAD_REQUEST, "{v}");
        assert!(v["error"].is_string());
    }
    let (st, _) = call(&app, "GET", "/sessions/none", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn concurrent_sessions_are_isolated() {
    let app = app();
    let body = json!({"htm": "chair", "policy": "greedy", "scenario": deterministic()});
    let (a, b) = tokio::join!(
        call(&app, "POST", "/sessions", Some(body.clone())),
        call(&app, "POST", "/sessions", Some(body.clone()))
    );
    let (ida, idb) = (a.1["id"].as_str().unwrap().to_string(), b.1["id"].as_str().unwrap().to_string());
    assert_ne!(ida, idb);
    let (st, _) = call(&app, "POST", &format!("/sessions/{ida}/choice"), Some(json!({"type": "action", "action_id": 2}))).await;
    assert_eq!(st, StatusCode::OK);
    let (_, va) = call(&app, "GET", &format!("/sessions/{ida}"), None).await;
    let (_, vb) = call(&app, "GET", &format!("/sessions/{idb}"), None).await;
    assert!(va["frames"].as_u64().unwrap() > 1);
    assert_eq!(vb["frames"], 1);
    assert_eq!(vb["frame"]["feasible_human"], json!([0, 1, 2, 3, 4]));
    let (st, _) = call(&app, "DELETE", &format!("/sessions/{ida}"), None).await;
    assert_eq!(st, StatusCode::NO_CONTENT);
    let (st, _) = call(&app, "GET", &format!("/sessions/{ida}"), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn joint_action_waits_for_the_robot() {
    let app = app();
    let body = json!({"htm": joint_task(), "policy": "greedy", "scenario": deterministic()});
    let (st, v) = call(&app, "POST", "/sessions", Some(body)).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    let id = v["id"].as_str().unwrap().to_string();
    let all = play(&app, &id, serde_json::from_value(v["frame"].clone()).unwrap()).await;

    let chose = all.iter().position(|f| f.event == "human_choice" && f.human_waiting).expect("human waited");
    assert_eq!(all[chose].time, 6);
    let detected = all[chose..].iter().find(|f| f.detected).unwrap();
    assert_eq!(detected.human_action, json!(3));
    assert_eq!(detected.robot_action, json!(1));
    // The joint action starts when the robot finishes its own action.
    let start = all.iter().find(|f| f.robot_action == json!(3)).unwrap();
    assert_eq!(start.time, 23);
    assert!(!start.human_waiting);
    let last = all.last().unwrap();
    assert_eq!(last.makespan, Some(28));
    assert_eq!(last.s_a, vec![1, 1, 1]);
    // A single R event ends the joint action.
    assert_eq!(all.iter().filter(|f| f.time == 28 && f.event != "human_choice").count(), 1);
}

#[tokio::test]
async fn change_of_mind_resets_detection() {
    let app = app();
    let body = json!({"htm": "chair", "policy": "greedy", "scenario": deterministic()});
    let (_, v) = call(&app, "POST", "/sessions", Some(body)).await;
    let id = v["id"].as_str().unwrap().to_string();
    let (st, v) = call(&app, "POST", &format!("/sessions/{id}/choice"), Some(json!({"type": "action", "action_id": 1}))).await;
    assert_eq!(st, StatusCode::OK);
    let fs = frames(&v);
    assert!(fs.iter().any(|f| f.event == "D" && f.time == 3));
    // The robot has responded to the detected action; the human now abandons rail 1.
    let before = fs.last().unwrap().clone();
    assert_eq!(before.event, "robot_choice");
    assert_eq!(before.robot_action, json!(2));
    assert!(before.can_change_mind);
    assert_eq!(before.status, Status::Advancing);
    let (st, v) = call(&app, "POST", &format!("/sessions/{id}/choice"), Some(json!({"type": "change_of_mind"}))).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let c = &frames(&v)[0];
    assert_eq!(c.event, "C");
    assert_eq!(c.human_action, json!("unknown"));
    assert!(!c.detected);
    assert_eq!(c.robot_action, json!("idle"));
    assert_eq!(c.s_a, before.s_a);
    assert_eq!(c.status, Status::AwaitingHumanChoice);
    // Rail 1 is not offered again straight away.
    assert_eq!(c.feasible_human, vec![0, 2, 3, 4]);
}

#[tokio::test]
async fn infeasible_choices_list_the_feasible_set() {
    let app = app();
    let body = json!({"htm": "chair", "policy": "greedy", "scenario": deterministic()});
    let (_, v) = call(&app, "POST", "/sessions", Some(body)).await;
    let id = v["id"].as_str().unwrap().to_string();
    let uri = format!("/sessions/{id}/choice");
    for bad in [json!({"type": "action", "action_id": 9}), json!({"type": "change_of_mind"}), json!({"type": "continue"})] {
        let (st, v) = call(&app, "POST", &uri, Some(bad)).await;
        assert_eq!(st, StatusCode::CONFLICT);
        assert_eq!(v["feasible"], json!([0, 1, 2, 3, 4]));
    }
    let (st, _) = call(&app, "POST", &uri, Some(json!({"type": "dance"}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);

    let first = serde_json::from_value(call(&app, "GET", &format!("/sessions/{id}"), None).await.1["frame"].clone()).unwrap();
    let all = play(&app, &id, first).await;
    // Completed actions are refused too, and then the session is finished.
    let (st, v) = call(&app, "POST", &uri, Some(json!({"type": "action", "action_id": 1}))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(v["error"], "session is finished");
    let last = all.last().unwrap();
    assert!(last.done);
    assert_eq!(last.makespan, Some(last.time));
}

#[test]
fn frames_are_gap_free_and_deterministic() {
    let run = |seed: u64| {
        let cfg = ScenarioConfig { p_fail: Some(0.2), ..Default::default() };
        let mut s = Session::new("x".into(), Arc::new(chair()), cfg, Arc::new(GreedyPolicy), "greedy".into(), seed);
        while !s.core().is_done() {
            let c = scripted(s.frames().last().unwrap());
            s.submit(c).unwrap();
        }
        s
    };
    let (mut a, b) = (run(5), run(5));
    assert_eq!(a.frames(), b.frames());
    for (i, f) in a.frames().iter().enumerate() {
        assert_eq!(f.seq, i as u64);
    }
    assert!(a.frames().windows(2).all(|w| w[0].k <= w[1].k && w[0].time <= w[1].time));
    assert_eq!(a.submit(Choice::Idle).unwrap_err(), SessionError::Done);

    // Replaying the log through the simulator lands on the same state.
    let core = replay(a.htm().clone(), a.config(), a.seed, a.log()).unwrap();
    assert_eq!(core.key(), a.core().key());
    assert_eq!(core.now(), a.frames().last().unwrap().makespan.unwrap());
    assert_eq!(core.counters(), a.core().counters());
}

#[tokio::test]
async fn robot_never_takes_an_infeasible_action() {
    // The simulator rejects infeasible robot actions, so a clean finish is the check.
    for seed in 0..20 {
        let cfg = ScenarioConfig { p_fail: Some(0.1), ..Default::default() };
        let mut s = Session::new("z".into(), Arc::new(chair()), cfg, Arc::new(hrc_core::policy::RandomPolicy), "random".into(), seed);
        while !s.core().is_done() {
            let c = scripted(s.frames().last().unwrap());
            s.submit(c).unwrap();
        }
        assert!(s.log().iter().any(|t| matches!(t, hrc_sandbox::Transition::Robot(a) if *a != ActionId::IDLE)));
    }
}

#[tokio::test]
async fn websocket_streams_backlog_then_live_frames() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = app();
    let app_srv = app.clone();
    tokio::spawn(async move { axum::serve(listener, app_srv).await.unwrap() });

    let body = json!({"htm": "chair", "policy": "greedy", "scenario": deterministic()});
    let (_, v) = call(&app, "POST", "/sessions", Some(body)).await;
    let id = v["id"].as_str().unwrap().to_string();
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/stream")).await.unwrap();
    let (_, mut rx) = ws.split();
    assert_eq!(next_frame(&mut rx).await.seq, 0);
    let (_, v) = call(&app, "POST", &format!("/sessions/{id}/choice"), Some(json!({"type": "action", "action_id": 1}))).await;
    let sent = frames(&v);
    for f in &sent {
        assert_eq!(&next_frame(&mut rx).await, f);
    }

    let (del, _) = call(&app, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!(del, StatusCode::NO_CONTENT);
    // The stream closes with the session.
    let end = tokio::time::timeout(std::time::Duration::from_secs(5), rx.next()).await.unwrap();
    assert!(matches!(end, None | Some(Ok(Message::Close(_))) | Some(Err(_))));
}

async fn next_frame<S>(rx: &mut S) -> Frame
where
    S: futures::Stream<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        if let Message::Text(t) = rx.next().await.unwrap().unwrap() {
            return serde_json::from_str(&t).unwrap();
        }
    }
}
