fn main() {
    std::process::exit(audiocap::cli::run(std::env::args_os()));
}
