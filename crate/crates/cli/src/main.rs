fn main() {
    std::process::exit(adadepth_cli::run_command(std::env::args_os()));
}
