fn main() {
    std::process::exit(avss::cli::run(std::env::args_os()));
}
