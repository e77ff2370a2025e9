//! Local stand-in for the completions endpoint, for trying record mode
//! without an API key.
//!
//! ```text
//! cargo run -p pga-core --example stub_llm -- 127.0.0.1:8089
//! ```

use pga_core::stub::{fake_llm_handler, StubServer};

fn main() -> std::io::Result<()> {
    let addr = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "127.0.0.1:8089".into());
    let server = StubServer::bind(&addr, fake_llm_handler)?;
    println!("serving {}", server.url());
    server.join();
    Ok(())
}
