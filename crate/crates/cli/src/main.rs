fn main() {
    std::process::exit(accent_forge::run(std::env::args_os()));
}
