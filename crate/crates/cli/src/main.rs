fn main() {
    std::process::exit(gait_cli::run(std::env::args_os()));
}
