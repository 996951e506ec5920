fn main() {
    std::process::exit(nlsctrl::cli::run(std::env::args_os()));
}
