mod commands;

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(commands::run(&argv));
}
