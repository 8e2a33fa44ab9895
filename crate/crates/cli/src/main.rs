fn main() {
    std::process::exit(dehaze_cli::run(std::env::args_os()));
}
