fn main() {
    eprintln!("metaloss: not yet wired up");
    std::process::exit(2);
}
