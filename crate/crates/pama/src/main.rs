use pama::cli;

fn main() {
    std::process::exit(cli::main_impl());
}
