//! Hand-checked metric cases. Expected values were worked out by hand from
//! the normalization rules and the fixture database contents, not by running
//! the metric code.

/// `(prediction, gold, expected DROP F1)`.
pub const DROP_F1_CASES: [(&str, &str, f64); 15] = [
    ("$1,305", "1305", 1.0),
    ("The cat", "cat", 1.0),
    ("red car", "red truck", 0.5),
    ("2018", "2019", 0.0),
    ("1,305 million", "1305 million", 1.0),
    // P = 2/3, R = 1
    ("New York City", "New York", 0.8),
    ("state-of-the-art", "state of art", 1.0),
    ("['Paris', 'London']", "['London', 'Paris']", 1.0),
    ("['Paris']", "['Paris', 'Rome']", 0.5),
    ("", "Paris", 0.0),
    ("3.50", "3.5", 1.0),
    ("12 apples", "12 pears", 0.5),
    // P = 1/2, R = 1
    ("the Eiffel Tower in Paris", "Eiffel Tower", 2.0 / 3.0),
    ("50%", "50", 1.0),
    // one slot scores 2/3, the span without the number scores 0
    ("['1,000', 'apples']", "['1000 apples']", 1.0 / 3.0),
];

pub struct SqlCase {
    pub database: &'static str,
    pub prediction: &'static str,
    pub gold: &'static str,
    pub expected: bool,
    /// Textually different from the gold query but semantically equivalent.
    pub equivalent: bool,
}

const fn case(database: &'static str, prediction: &'static str, gold: &'static str, expected: bool, equivalent: bool) -> SqlCase {
    SqlCase {
        database,
        prediction,
        gold,
        expected,
        equivalent,
    }
}

pub const SQL_MATCH_CASES: [SqlCase; 20] = [
    case("concert_singer", "SELECT count(singer_id) FROM singer AS s WHERE s.country = 'France'", "SELECT count(*) FROM singer WHERE country = 'France'", true, true),
    case("concert_singer", "SELECT name FROM singer WHERE NOT age <= 40", "SELECT name FROM singer WHERE age > 40", true, true),
    case("concert_singer", "SELECT name FROM stadium WHERE stadium_id IN (SELECT stadium_id FROM concert WHERE year = '2014')", "SELECT T2.name FROM concert AS T1 JOIN stadium AS T2 ON T1.stadium_id = T2.stadium_id WHERE T1.year = '2014'", true, true),
    case("concert_singer", "SELECT capacity FROM stadium ORDER BY capacity DESC LIMIT 1", "SELECT max(capacity) FROM stadium", true, true),
    case("flight_2", "SELECT count(*) FROM flights WHERE sourceairport IN ('ABR', 'APG')", "SELECT count(*) FROM flights WHERE sourceairport = 'APG' OR sourceairport = 'ABR'", true, true),
    case("concert_singer", "SELECT name FROM singer ORDER BY age ASC", "SELECT name FROM singer ORDER BY age DESC", false, false),
    case("concert_singer", "SELECT name, age FROM singer", "SELECT age, name FROM singer", false, false),
    case("concert_singer", "SELECT avg(age) FROM singer", "SELECT avg(age) FROM singer WHERE country = 'France'", false, false),
    // three concerts in each year
    case("concert_singer", "SELECT count(*) FROM concert WHERE year = '2014'", "SELECT count(*) FROM concert WHERE year = '2015'", true, false),
    case("concert_singer", "SELECT name FROM stadium WHERE capacity > 3000", "SELECT name FROM stadium WHERE capacity > 10000", false, false),
    case("concert_singer", "SELEC name FROM singer", "SELECT name FROM singer", false, false),
    case("concert_singer", "SELECT DISTINCT country FROM singer", "SELECT country FROM singer", false, false),
    case("flight_2", "SELECT count(*) FROM flights", "SELECT count(*) FROM airlines", false, false),
    case("flight_2", "SELECT airportname FROM airports WHERE city = 'Aberdeen'", "SELECT airportname FROM airports WHERE city = 'Aberdeen'", true, false),
    case("flight_2", "SELECT city FROM airports WHERE airportcode = 'AKC'", "SELECT city FROM airports WHERE airportcode = 'ABI'", false, false),
    case("dog_kennels", "SELECT avg(age) FROM Dogs", "SELECT avg(age) FROM Dogs WHERE breed_code = 'BUL'", false, false),
    case("dog_kennels", "SELECT sum(cost_of_treatment) FROM Treatments", "SELECT sum(cost_of_treatment) FROM Treatments WHERE treatment_type_code = 'WALK'", false, false),
    case("dog_kennels", "SELECT first_name FROM Professionals WHERE state = 'Indiana'", "SELECT first_name FROM Professionals WHERE state = 'Indiana' AND role_code = 'Employee'", false, false),
    case("employee_hire", "SELECT count(*) FROM employee WHERE age = 29", "SELECT count(*) FROM employee WHERE city = 'Bath'", false, false),
    case("employee_hire", "SELECT name FROM employee WHERE city = 'Bristol' ORDER BY age", "SELECT name FROM employee WHERE city = 'Bristol' ORDER BY age DESC", false, false),
];

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use super::*;
    use crate::fixtures::spider::materialize_databases;
    use crate::metrics::drop::drop_f1;
    use crate::metrics::sql::execution_match;

    #[test]
    fn drop_cases() {
        for (p, g, want) in DROP_F1_CASES {
            assert!((drop_f1(p, g) - want).abs() <= 1e-12, "{p:?} vs {g:?}: {}", drop_f1(p, g));
        }
    }

    #[test]
    fn sql_cases() {
        assert_eq!(SQL_MATCH_CASES.iter().filter(|c| c.equivalent).count(), 5);
        let d = tempfile::tempdir().unwrap();
        let envs = materialize_databases(d.path(), Duration::from_secs(5)).unwrap();
        for c in &SQL_MATCH_CASES {
            let got = execution_match(c.prediction, c.gold, &envs[c.database]).unwrap().matched;
            assert_eq!(got, c.expected, "{} vs {}", c.prediction, c.gold);
        }
    }
}
