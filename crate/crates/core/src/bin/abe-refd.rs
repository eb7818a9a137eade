//! Reference ABE daemon speaking the JSON-lines protocol on stdin/stdout.

use std::io::{self, BufWriter};

use epochkey_core::abe::daemon::ReferenceDaemon;

fn main() -> io::Result<()> {
    let stdin = io::stdin();
    let stdout = io::stdout();
    ReferenceDaemon::new().serve(stdin.lock(), BufWriter::new(stdout.lock()))
}
