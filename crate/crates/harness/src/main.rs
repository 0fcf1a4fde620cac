fn main() {
    std::process::exit(gradnoise::run_cli(std::env::args_os()));
}
