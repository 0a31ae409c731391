//! Test adapter: answers every request with a fixed detection list.
//!
//! Usage: `canned-adapter [--mode MODE] [DETECTIONS_JSON]`, where
//! `DETECTIONS_JSON` is an array of `{"box", "label", "score"}` objects and
//! MODE is one of `echo` (default), `crash`, `hang`, `garbage`, `wrong-id`.

use std::io::{BufRead, Write};

use tripatch::detector::{WireDetection, WireRequest, WireResponse};

fn main() {
    let mut mode = "echo".to_string();
    let mut detections: Vec<WireDetection> = Vec::new();
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        if a == "--mode" {
            mode = args.next().expect("--mode needs a value");
        } else {
            detections = serde_json::from_str(&a).expect("detections must be a JSON array");
        }
    }

    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        let req: WireRequest = serde_json::from_str(&line).expect("request is JSON");
        let reply = match mode.as_str() {
            "crash" => std::process::exit(17),
            "hang" => {
                std::thread::sleep(std::time::Duration::from_secs(3600));
                continue;
            }
            "garbage" => "this is not json".to_string(),
            "wrong-id" => serde_json::to_string(&WireResponse {
                id: req.id + 1,
                detections: detections.clone(),
            })
            .unwrap(),
            _ => {
                assert!(std::path::Path::new(&req.image).is_absolute(), "image path must be absolute");
                serde_json::to_string(&WireResponse {
                    id: req.id,
                    detections: detections.clone(),
                })
                .unwrap()
            }
        };
        writeln!(stdout, "{reply}").unwrap();
        stdout.flush().unwrap();
    }
}
