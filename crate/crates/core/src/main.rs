fn main() {
    std::process::exit(actdock::cli::run(std::env::args_os()));
}
