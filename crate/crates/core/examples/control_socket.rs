//! Client interface over the line-based control socket: a receiver
//! endpoint behind `REQ`/`RES`, the sender driven in-process.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};

use qot::auth::SecretStore;
use qot::params::ProtocolParams;
use qot::pipeline::control::serve;
use qot::pipeline::{demo_secret, loopback_endpoints, Client, OtRequest};
use qot::qsim::ChannelModel;

fn main() {
    let p = ProtocolParams::smoke_scale();
    let store = SecretStore::new(&demo_secret(4096, 5));
    let (alice, bob) = loopback_endpoints(&p, &ChannelModel::with_qber(0.0075), 5, &store).expect("handshake");
    let sender = Client::spawn(alice);
    let receiver = Client::spawn(bob);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();

    std::thread::scope(|s| {
        s.spawn(|| serve(listener, &receiver).unwrap());
        let id = sender.request_ots(OtRequest { count: 2, length: 64, choices: None }).unwrap();

        let mut conn = TcpStream::connect(addr).unwrap();
        let mut lines = BufReader::new(conn.try_clone().unwrap()).lines();
        writeln!(conn, "REQ 2 64 80").unwrap();
        println!("{}", lines.next().unwrap().unwrap());
        println!("{}", lines.next().unwrap().unwrap());
        writeln!(conn, "POLL 99").unwrap();
        println!("{}", lines.next().unwrap().unwrap());
        writeln!(conn, "QUIT").unwrap();

        let done = sender.wait(id, std::time::Duration::from_secs(60));
        println!("sender side: {done:?}");
    });
    sender.shutdown();
    receiver.shutdown();
}
