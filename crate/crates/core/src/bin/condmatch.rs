fn main() {
    std::process::exit(condmatch::cli::run(std::env::args_os()));
}
