//! Published coefficient tables of the classical chill models.

/// Default upper bound of the Chill Hours band, °C. Hours with
/// `0 <= T <= CHILL_HOURS_UPPER` count as one chill hour each
/// (Bennett 1949; Weinberger 1950).
pub const CHILL_HOURS_UPPER: f64 = 7.2;

/// Lower bound of the Chill Hours band, °C.
pub const CHILL_HOURS_LOWER: f64 = 0.0;

/// Utah model hourly weights.
///
/// Richardson, E. A., Seeley, S. D., Walker, D. R. (1974). A model for
/// estimating the completion of rest for 'Redhaven' and 'Elberta' peach trees.
/// HortScience 9(4), 331-332.
///
/// Each entry is `(upper bound °C, weight)`: an hourly temperature `T` takes the
/// weight of the first row with `T <= upper bound`; temperatures above the last
/// bound take [`UTAH_ABOVE_LAST`]. The bounds follow the published 0.1 °C
/// resolution table (<=1.4, 1.5-2.4, 2.5-9.1, 9.2-12.4, 12.5-15.9, 16-18, >18).
pub const UTAH_TABLE: [(f64, f64); 6] = [
    (1.4, 0.0),
    (2.4, 0.5),
    (9.1, 1.0),
    (12.4, 0.5),
    (15.9, 0.0),
    (18.0, -0.5),
];

/// Utah weight for hours warmer than 18 °C.
pub const UTAH_ABOVE_LAST: f64 = -1.0;

/// Largest Utah weight, reached across the 2.5-9.1 °C band.
pub const UTAH_MAX_WEIGHT: f64 = 1.0;
