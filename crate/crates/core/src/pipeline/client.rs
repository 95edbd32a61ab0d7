//! In-process client: requests are queued to an endpoint running on its own
//! thread and results are collected per request id.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::otcore::{AbortReason, OtResult};
use crate::transport::Transport;
use crate::Party;

use super::session::Endpoint;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OtRequest {
    pub count: usize,
    /// Output bits per string.
    pub length: usize,
    /// Receiver only: one choice bit per OT.
    pub choices: Option<Vec<bool>>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RequestError {
    #[error("count and length must be positive")]
    Empty,
    #[error("receiver requests need exactly {expected} choice bits, got {got}")]
    Choices { expected: usize, got: usize },
    #[error("sender requests carry no choice bits")]
    SenderChoices,
    #[error("endpoint stopped")]
    Stopped,
}

impl OtRequest {
    pub fn validate(&self, role: Party) -> Result<(), RequestError> {
        if self.count == 0 || self.length == 0 {
            return Err(RequestError::Empty);
        }
        match (role, &self.choices) {
            (Party::Sender, Some(_)) => Err(RequestError::SenderChoices),
            (Party::Receiver, None) => Err(RequestError::Choices {
                expected: self.count,
                got: 0,
            }),
            (Party::Receiver, Some(c)) if c.len() != self.count => Err(RequestError::Choices {
                expected: self.count,
                got: c.len(),
            }),
            _ => Ok(()),
        }
    }
}

pub type BatchResult = Vec<Result<OtResult, AbortReason>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PollResult {
    Pending,
    Done(BatchResult),
    Unknown,
}

enum Cmd {
    Run(u64, OtRequest),
    Stop,
}

#[derive(Default)]
struct Board {
    slots: HashMap<u64, Option<BatchResult>>,
}

/// Handle to an endpoint thread. Cheap to share behind an `Arc`.
pub struct Client<T: Transport + 'static> {
    role: Party,
    tx: Mutex<Sender<Cmd>>,
    board: Arc<(Mutex<Board>, Condvar)>,
    next_id: AtomicU64,
    worker: Mutex<Option<JoinHandle<Endpoint<T>>>>,
}

impl<T: Transport + 'static> Client<T> {
    /// Moves the endpoint onto a worker thread. Requests run strictly in
    /// submission order; each OT is its own session, so a batch can
    /// partially fail.
    pub fn spawn(mut endpoint: Endpoint<T>) -> Self {
        let role = endpoint.role();
        let (tx, rx) = mpsc::channel::<Cmd>();
        let board: Arc<(Mutex<Board>, Condvar)> = Arc::default();
        let b = Arc::clone(&board);
        let worker = std::thread::spawn(move || {
            while let Ok(Cmd::Run(id, req)) = rx.recv() {
                let results: BatchResult = (0..req.count)
                    .map(|i| {
                        let choice = req.choices.as_ref().map(|c| c[i]);
                        endpoint.run_ot(req.length, choice)
                    })
                    .collect();
                let (lock, cv) = &*b;
                lock.lock().unwrap().slots.insert(id, Some(results));
                cv.notify_all();
            }
            endpoint
        });
        Self {
            role,
            tx: Mutex::new(tx),
            board,
            next_id: AtomicU64::new(1),
            worker: Mutex::new(Some(worker)),
        }
    }

    pub fn role(&self) -> Party {
        self.role
    }

    pub fn request_ots(&self, req: OtRequest) -> Result<u64, RequestError> {
        req.validate(self.role)?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.board.0.lock().unwrap().slots.insert(id, None);
        self.tx
            .lock()
            .unwrap()
            .send(Cmd::Run(id, req))
            .map_err(|_| RequestError::Stopped)?;
        Ok(id)
    }

    pub fn poll(&self, id: u64) -> PollResult {
        match self.board.0.lock().unwrap().slots.get(&id) {
            None => PollResult::Unknown,
            Some(None) => PollResult::Pending,
            Some(Some(r)) => PollResult::Done(r.clone()),
        }
    }

    /// Blocks until the request completes or `timeout` passes.
    pub fn wait(&self, id: u64, timeout: Duration) -> PollResult {
        let deadline = Instant::now() + timeout;
        let (lock, cv) = &*self.board;
        let mut g = lock.lock().unwrap();
        loop {
            match g.slots.get(&id) {
                None => return PollResult::Unknown,
                Some(Some(r)) => return PollResult::Done(r.clone()),
                Some(None) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return PollResult::Pending;
                    }
                    g = cv.wait_timeout(g, deadline - now).unwrap().0;
                }
            }
        }
    }

    /// Stops after the queued requests and returns the endpoint.
    pub fn shutdown(&self) -> Option<Endpoint<T>> {
        let _ = self.tx.lock().unwrap().send(Cmd::Stop);
        self.worker.lock().unwrap().take().map(|h| h.join().expect("endpoint thread panicked"))
    }
}
