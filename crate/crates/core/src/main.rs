fn main() {
    std::process::exit(openviewer::cli::run(std::env::args_os()));
}
