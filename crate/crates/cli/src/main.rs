fn main() {
    std::process::exit(bagpipe_cli::dispatch(std::env::args_os()));
}
