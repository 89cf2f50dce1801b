//! Like the echo adapter, but drops one id from every predict response.

#[path = "../echo.rs"]
mod echo;

fn main() -> anyhow::Result<()> {
    echo::main_with(true)
}
