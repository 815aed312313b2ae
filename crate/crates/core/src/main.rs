fn main() {
    std::process::exit(cloudcrf::cli::run(std::env::args_os()));
}
