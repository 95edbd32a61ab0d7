//! Line-based control socket in front of a [`Client`].
//!
//! ```text
//! REQ <count> <length> [choices-hex]   -> RES <id> pending -
//!                                         RES <id> ok|partial|aborted <payload>
//! POLL <id>                            -> RES <id> pending|ok|partial|aborted|unknown <payload>
//! QUIT                                 -> connection closed
//! ```
//!
//! The payload lists one entry per OT, comma separated: `m0hex:m1hex` at the
//! sender, `c:mchex` at the receiver, `abort=<reason>` for a failed session.
//! Choice bits are read MSB-first from the hex string.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use crate::bits::BitString;
use crate::otcore::OtResult;
use crate::transport::Transport;

use super::client::{BatchResult, Client, OtRequest, PollResult};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlCmd {
    Req(OtRequest),
    Poll(u64),
    Quit,
}

/// First `count` bits of a hex string, MSB-first. The string must hold
/// exactly `ceil(count / 8)` bytes.
pub fn choices_from_hex(hex_str: &str, count: usize) -> Result<Vec<bool>, String> {
    let bytes = hex::decode(hex_str).map_err(|e| format!("bad choices hex: {e}"))?;
    if bytes.len() != count.div_ceil(8) {
        return Err(format!("{count} choices need {} hex bytes", count.div_ceil(8)));
    }
    let bits = BitString::from_bytes(&bytes, count).ok_or("bad choices length")?;
    Ok(bits.iter().collect())
}

pub fn choices_to_hex(choices: &[bool]) -> String {
    hex::encode(BitString::from_bools(choices).to_bytes())
}

pub fn parse_control_line(line: &str) -> Result<ControlCmd, String> {
    let words: Vec<&str> = line.split_whitespace().collect();
    let num = |s: &str| s.parse::<u64>().map_err(|_| format!("not a number: {s}"));
    match words.as_slice() {
        ["REQ", count, length, rest @ ..] if rest.len() <= 1 => {
            let count = num(count)? as usize;
            let choices = rest.first().map(|h| choices_from_hex(h, count)).transpose()?;
            Ok(ControlCmd::Req(OtRequest {
                count,
                length: num(length)? as usize,
                choices,
            }))
        }
        ["POLL", id] => Ok(ControlCmd::Poll(num(id)?)),
        ["QUIT"] => Ok(ControlCmd::Quit),
        _ => Err(format!("unrecognized command: {}", line.trim())),
    }
}

pub fn format_payload(results: &BatchResult) -> String {
    results
        .iter()
        .map(|r| match r {
            Ok(OtResult::Sender { m0, m1 }) => format!("{}:{}", hex::encode(m0.to_bytes()), hex::encode(m1.to_bytes())),
            Ok(OtResult::Receiver { mc, c }) => format!("{}:{}", *c as u8, hex::encode(mc.to_bytes())),
            Err(reason) => format!("abort={reason}"),
        })
        .collect::<Vec<_>>()
        .join(",")
}

pub fn batch_status(results: &BatchResult) -> &'static str {
    let ok = results.iter().filter(|r| r.is_ok()).count();
    if ok == results.len() {
        "ok"
    } else if ok == 0 {
        "aborted"
    } else {
        "partial"
    }
}

pub fn format_res(id: u64, poll: &PollResult) -> String {
    match poll {
        PollResult::Pending => format!("RES {id} pending -"),
        PollResult::Unknown => format!("RES {id} unknown -"),
        PollResult::Done(r) => format!("RES {id} {} {}", batch_status(r), format_payload(r)),
    }
}

/// Serves one control connection until QUIT or EOF. Returns true on QUIT.
pub fn handle_connection<T: Transport + 'static>(stream: TcpStream, client: &Client<T>) -> std::io::Result<bool> {
    let mut out = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_control_line(&line) {
            Ok(ControlCmd::Quit) => return Ok(true),
            Ok(ControlCmd::Poll(id)) => writeln!(out, "{}", format_res(id, &client.poll(id)))?,
            Ok(ControlCmd::Req(req)) => match client.request_ots(req) {
                Ok(id) => {
                    writeln!(out, "{}", format_res(id, &PollResult::Pending))?;
                    out.flush()?;
                    let done = loop {
                        if let r @ PollResult::Done(_) = client.wait(id, Duration::from_secs(3600)) {
                            break r;
                        }
                    };
                    writeln!(out, "{}", format_res(id, &done))?;
                }
                Err(e) => writeln!(out, "RES - error {}", e.to_string().replace(' ', "_"))?,
            },
            Err(e) => writeln!(out, "RES - error {}", e.replace(' ', "_"))?,
        }
        out.flush()?;
    }
    Ok(false)
}

/// Accepts control connections one at a time until a client sends QUIT.
pub fn serve<T: Transport + 'static>(listener: TcpListener, client: &Client<T>) -> std::io::Result<()> {
    for stream in listener.incoming() {
        if handle_connection(stream?, client)? {
            break;
        }
    }
    Ok(())
}
