fn main() {
    std::process::exit(qot::cli::run(std::env::args_os()));
}
