//! Adapter that echoes a trivial prediction; used to check the protocol.

#[path = "../echo.rs"]
mod echo;

fn main() -> anyhow::Result<()> {
    echo::main_with(false)
}
