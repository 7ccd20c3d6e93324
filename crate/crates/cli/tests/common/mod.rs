#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use edgeplane::policy::api::PolicyApi;
use edgeplane::scenario::Scenario;
use serde::{Deserialize, Serialize};

pub fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn tests_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests")
}

pub fn edgeplane(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgeplane"))
        .args(args)
        .env("EDGEPLANE_LOG", "off")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn uav_api() -> PolicyApi {
    let text = std::fs::read_to_string(scenario_path("uav.yaml")).unwrap();
    let s = Scenario::parse(&text).unwrap();
    PolicyApi::new(s.policies, s.graph)
}

/// One request to the policy agent and the response recorded for it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exchange {
    pub method: String,
    pub path: String,
    pub body: String,
    #[serde(default)]
    pub status: u16,
    #[serde(default)]
    pub response: String,
}

pub fn fixture_path() -> PathBuf {
    tests_dir().join("fixtures/wire_api.json")
}

pub fn exchanges() -> Vec<Exchange> {
    serde_json::from_str(&std::fs::read_to_string(fixture_path()).unwrap()).unwrap()
}

/// The policy agent running as a child process; killed on drop.
pub struct Agent {
    child: Child,
    pub addr: String,
}

impl Agent {
    pub fn start(scenario: &Path) -> Agent {
        let mut child = Command::new(env!("CARGO_BIN_EXE_edgeplane"))
            .args(["serve-policy", "--scenario"])
            .arg(scenario)
            .args(["--bind", "127.0.0.1:0"])
            .env("EDGEPLANE_LOG", "off")
            .stdout(Stdio::piped())
            .spawn()
            .expect("agent starts");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected first line {line:?}"))
            .to_owned();
        Agent { child, addr }
    }

    /// Sends one HTTP/1.1 request and returns (status, body).
    pub fn request(&self, method: &str, path: &str, body: &str) -> (u16, String) {
        let mut stream = TcpStream::connect(&self.addr).unwrap();
        write!(
            stream,
            "{method} {path} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            self.addr,
            body.len()
        )
        .unwrap();
        let mut raw = String::new();
        stream.read_to_string(&mut raw).unwrap();
        let (head, rest) = raw.split_once("\r\n\r\n").expect("response has a head");
        let status = head.split(' ').nth(1).unwrap().parse().unwrap();
        let chunked = head
            .lines()
            .any(|l| l.to_ascii_lowercase().starts_with("transfer-encoding:") && l.contains("chunked"));
        (status, if chunked { dechunk(rest) } else { rest.to_owned() })
    }
}

fn dechunk(mut s: &str) -> String {
    let mut out = String::new();
    loop {
        let (size, rest) = s.split_once("\r\n").unwrap();
        let n = usize::from_str_radix(size.trim(), 16).unwrap();
        if n == 0 {
            return out;
        }
        out.push_str(&rest[..n]);
        s = &rest[n + 2..];
    }
}

impl Drop for Agent {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
