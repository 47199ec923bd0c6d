fn main() {
    std::process::exit(modnmt_cli::dispatch(std::env::args_os()));
}
