fn main() {
    std::process::exit(rpg_cli::run(std::env::args_os()));
}
