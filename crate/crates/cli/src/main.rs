fn main() {
    std::process::exit(anatomask_cli::run(std::env::args_os()));
}
