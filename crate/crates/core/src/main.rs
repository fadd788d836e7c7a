fn main() {
    std::process::exit(perceiver_triage::cli::run(std::env::args_os()));
}
