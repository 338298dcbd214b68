fn main() {
    println!("touchspot");
}
