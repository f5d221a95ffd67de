fn main() {
    std::process::exit(torus_sync::cli::run(std::env::args_os()));
}
