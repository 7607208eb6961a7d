use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use beeplan::pipeline::frame::{read_frame, MsgType, WireFrame};
use beeplan::pipeline::{run_local_pipeline, run_wire, shape_link, LinkShape, LocalPipelineConfig, PayloadKind, Role, RoleConfig};

#[test]
fn eight_megabits_drain_a_megabyte_in_a_second() {
    let mut link = shape_link(std::io::sink(), LinkShape::mbps(8.0, 0.0));
    let frame = WireFrame {
        payload: vec![0; 1_000_000 - 20],
        ..WireFrame::control(MsgType::Activations)
    };
    let t = link.send_frame(&frame).unwrap().as_secs_f64() * 1e3;
    assert!((t - 1000.0).abs() <= 100.0, "drained in {t} ms");
}

#[test]
fn latency_delays_even_tiny_frames() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let reader = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        read_frame(&mut s).unwrap();
        Instant::now()
    });
    let stream = TcpStream::connect(addr).unwrap();
    let mut link = shape_link(stream, LinkShape::mbps(100.0, 50.0));
    let start = Instant::now();
    link.send_frame(&WireFrame::control(MsgType::Ack)).unwrap();
    let arrived = reader.join().unwrap();
    assert!(arrived - start >= Duration::from_millis(50));
}

#[test]
fn unlimited_shape_is_a_passthrough() {
    let mut link = shape_link(Vec::new(), LinkShape::unlimited());
    let frame = WireFrame {
        payload: vec![1; 10_000_000],
        ..WireFrame::control(MsgType::Activations)
    };
    let t = link.send_frame(&frame).unwrap();
    assert!(t < Duration::from_millis(100), "{t:?}");
    assert_eq!(link.into_inner(), frame.to_bytes());
}

fn small_run(micro_batches: u32, compression: bool, split: bool, payload: PayloadKind) -> LocalPipelineConfig {
    LocalPipelineConfig {
        blocks: vec![1, 2, 1],
        hops: vec![LinkShape::unlimited(); 2],
        steps: 3,
        micro_batches,
        micro_batch_size: 4 / micro_batches,
        hidden_dim: 300,
        compression,
        split,
        payload,
        seed: 5,
        ..LocalPipelineConfig::two_stage(LinkShape::unlimited())
    }
}

#[test]
fn sink_sees_identical_bytes_for_every_flag_combination() {
    let mut digests = Vec::new();
    for payload in [PayloadKind::Activations, PayloadKind::PackedSd] {
        for m in [1, 2, 4] {
            for (compression, split) in [(false, true), (true, true), (true, false)] {
                let run = run_local_pipeline(&small_run(m, compression, split, payload)).unwrap();
                assert!(run.lossless(), "M={m} compression={compression} split={split}");
                assert_eq!(run.metrics.hop_frames, vec![u64::from(3 * m); 2]);
                if payload == PayloadKind::Activations && m == 1 {
                    digests.push(run.source_digest);
                }
            }
        }
    }
    digests.dedup();
    assert_eq!(digests.len(), 1, "same seed, same activations");
}

#[test]
fn compression_shortens_shaped_transfers() {
    let run = |compression| {
        let cfg = LocalPipelineConfig {
            hidden_dim: 100_000,
            compression,
            ..LocalPipelineConfig::two_stage(LinkShape::mbps(50.0, 0.0))
        };
        run_local_pipeline(&cfg).unwrap().metrics.hop_transfer_ms[0]
    };
    let (raw, compressed) = (run(false), run(true));
    assert!(compressed < raw, "{compressed} vs {raw}");
}

#[test]
fn separate_roles_cooperate_over_tcp() {
    let probe = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = probe.local_addr().unwrap().to_string();
    drop(probe);
    let sink = {
        let mut cfg = RoleConfig::new(Role::Sink);
        cfg.bind = Some(addr.clone());
        thread::spawn(move || run_wire(&cfg))
    };
    let mut cfg = RoleConfig::new(Role::Source);
    cfg.connect = Some(addr);
    cfg.micro_batches = 3;
    cfg.steps = 2;
    cfg.hidden_dim = 64;
    cfg.compression = true;
    let source = run_wire(&cfg).unwrap();
    let sink = sink.join().unwrap().unwrap();
    assert_eq!(source.hop_frames, vec![6]);
    assert_eq!(source.output_digest, sink.output_digest);
    assert!(source.completion_ms >= source.stage_busy_ms[0]);
}

#[test]
fn peer_disappearing_mid_run_is_reported() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let fake_sink = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let mut buf = [0u8; 64];
        let _ = s.read(&mut buf);
        let _ = s.flush();
    });
    let mut cfg = RoleConfig::new(Role::Source);
    cfg.connect = Some(addr);
    cfg.steps = 50;
    cfg.hidden_dim = 100_000;
    let err = run_wire(&cfg).unwrap_err();
    assert!(matches!(err, beeplan::pipeline::WireError::ConnectionLost(_)), "{err}");
    fake_sink.join().unwrap();
}
