#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    sivit_cli::init_logging();
    std::process::exit(sivit_cli::run(std::env::args_os().collect()));
}
