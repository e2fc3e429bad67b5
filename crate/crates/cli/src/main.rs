fn main() {
    std::process::exit(lgpt_lab::run_cli(std::env::args_os()));
}
